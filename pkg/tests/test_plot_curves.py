import pandas as pd
import pytest

from plot_curves import create_curve_plot, main


@pytest.fixture
def curves():
    return pd.DataFrame({
        'variant': ['RSI', 'RSI', 'ASI', 'ASI'],
        'iteration': [1, 2, 1, 2],
        'mean': [0.1, 0.2, 0.15, 0.35],
        'min': [0.05, 0.1, 0.1, 0.3],
        'max': [0.2, 0.3, 0.2, 0.4],
        'runs': [3, 3, 3, 3],
    })


def test_band_and_line_per_variant(curves):
    fig = create_curve_plot(curves, 'walk')
    assert [trace.name for trace in fig.data] == ['RSI range', 'RSI', 'ASI range', 'ASI']
    assert list(fig.data[1].y) == [0.1, 0.2]
    assert fig.layout.title.text == 'walk'


def test_empty_curves_give_no_figure():
    assert create_curve_plot(pd.DataFrame(columns=['variant', 'iteration', 'mean', 'min', 'max'])) is None


def test_main_writes_html(curves, tmp_path, mocker):
    mocker.patch('plot_curves.setup_logging')
    path = tmp_path / 'curves.csv'
    curves.to_csv(path, index=False)
    assert main([str(path)]) == 0
    assert (tmp_path / 'curves.html').exists()


def test_main_reports_missing_and_empty_files(tmp_path, mocker):
    mocker.patch('plot_curves.setup_logging')
    assert main([str(tmp_path / 'absent.csv')]) == 1
    empty = tmp_path / 'empty.csv'
    pd.DataFrame(columns=['variant', 'iteration', 'mean', 'min', 'max']).to_csv(empty, index=False)
    assert main([str(empty)]) == 2
