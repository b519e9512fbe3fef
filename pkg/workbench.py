import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from dotenv import load_dotenv

from completion import CompletionQuery, complete_motion, save_completion
from dynsim import ContactParams
from imitenv import EpisodeConfig, ImitationEnv
from initstate import init_dist_from_dict, make_init_dist
from logging_config import setup_logging, setup_performance_logging
from recon import (
    HISTORY_COLUMNS, ReconConfig, load_predictions, run_reconstruction, save_predictions, synth_predictions,
)
from refmotion import MotionFormatError, ReferenceMotion, load_library, resolve_motion, save_motion
from rlcore import (
    METRIC_COLUMNS, Agent, TrainConfig, Trainer, TrainingError, evaluate_policy, load_checkpoint, save_checkpoint,
)
from rotkin import KinematicsError, KinematicTree, Pose, load_character

load_dotenv()

logger = logging.getLogger(__name__)

REPO_DIR = Path(__file__).resolve().parent
PRESET_DIR = REPO_DIR / 'presets'
SCHEMA_DIR = REPO_DIR / 'schemas'
CHECKPOINT_NAME = 'checkpoint.bin'
INIT_MODES = ('fsi', 'rsi', 'asi')
ABLATION_MODES = ('init', 'k', 'recon')

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class ConfigError(ValueError):
    """Raised for invalid experiment configurations or command arguments."""
    pass


def worker_cap() -> int:
    """Upper bound on worker processes, from SFVLAB_THREADS."""
    value = os.getenv('SFVLAB_THREADS')
    if not value:
        return os.cpu_count() or 1
    try:
        return max(1, int(value))
    except ValueError:
        raise ConfigError(f"SFVLAB_THREADS must be an integer, got '{value}'")


@dataclass
class ExperimentConfig:
    character: str
    motion: Optional[str] = None
    predictions: Optional[str] = None
    init: str = 'asi'
    k: int = 10
    preset: str = 'desk'
    seeds: List[int] = field(default_factory=lambda: [0])
    iterations: Optional[int] = None
    out: str = 'runs'
    overrides: Dict = field(default_factory=dict)
    episode: Dict = field(default_factory=dict)
    contact: Dict = field(default_factory=dict)
    recon: Dict = field(default_factory=dict)
    synth: Dict = field(default_factory=dict)
    ablation: Dict = field(default_factory=dict)
    eval_episodes: int = 32
    eval_init: str = 'rsi'
    library: Optional[str] = None
    query: Optional[str] = None
    duration: float = 2.0
    checkpoint: Optional[str] = None
    base: Path = field(default=Path('.'), repr=False)

    def __post_init__(self):
        self.init = self.init.lower()
        self.eval_init = self.eval_init.lower()
        for name in ('init', 'eval_init'):
            if getattr(self, name) not in INIT_MODES:
                raise ConfigError(f"'{name}' must be one of {INIT_MODES}, got '{getattr(self, name)}'")
        if not self.seeds:
            raise ConfigError("'seeds' must list at least one seed")
        if self.k < 1:
            raise ConfigError(f"'k' must be at least 1, got {self.k}")
        self.base = Path(self.base)

    def path(self, value: str) -> Path:
        path = Path(value)
        return path if path.is_absolute() else self.base / path

    @property
    def out_dir(self) -> Path:
        return self.path(self.out)

    def require(self, *names: str):
        """Check that the named path fields are set and exist."""
        for name in names:
            value = getattr(self, name)
            if value is None:
                raise ConfigError(f"Experiment config is missing '{name}'")
            if name == 'motion' and value.startswith('synth:'):
                continue
            if not self.path(value).exists():
                raise ConfigError(f"'{name}' path does not exist: {self.path(value)}")

    def to_dict(self) -> Dict:
        data = asdict(self)
        data.pop('base')
        return data


def load_experiment(path) -> ExperimentConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"Config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"Malformed config {path}: {e}")
    known = set(ExperimentConfig.__dataclass_fields__) - {'base'}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"Unknown config fields in {path}: {unknown}")
    if 'character' not in data:
        raise ConfigError(f"Config {path} is missing required field 'character'")
    return ExperimentConfig(**data, base=path.resolve().parent)


def load_preset(name: str) -> Dict:
    path = PRESET_DIR / f"{name}.json"
    if not path.exists():
        available = sorted(p.stem for p in PRESET_DIR.glob('*.json'))
        raise ConfigError(f"Unknown preset '{name}', expected one of {available}")
    return json.loads(path.read_text())


def train_config_for(cfg: ExperimentConfig) -> TrainConfig:
    """Preset values, then config overrides, then the iteration budget."""
    data = load_preset(cfg.preset)
    data.update(cfg.overrides)
    if cfg.iterations is not None:
        data['iterations'] = cfg.iterations
    data['workers'] = min(int(data.get('workers', 1)), worker_cap())
    try:
        return TrainConfig.from_dict(data)
    except (TypeError, TrainingError) as e:
        raise ConfigError(f"Invalid training options: {e}")


def build_env(cfg: ExperimentConfig, motion: Optional[ReferenceMotion] = None,
              tree: Optional[KinematicTree] = None) -> ImitationEnv:
    tree = tree or load_character(cfg.path(cfg.character))
    if motion is None:
        if cfg.motion is None:
            raise ConfigError("Experiment config is missing 'motion'")
        motion = resolve_motion(cfg.motion, tree, cfg.base)
    motion.validate(tree)
    try:
        episode = EpisodeConfig(**cfg.episode)
        contact = ContactParams(**cfg.contact)
    except TypeError as e:
        raise ConfigError(f"Invalid episode or contact options: {e}")
    return ImitationEnv(tree, motion, episode, contact=contact)


def _write_json(path: Path, data: Dict):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True))


# Training

def run_training(cfg: ExperimentConfig, out_dir: Path, seed: int, init_mode: Optional[str] = None,
                 k: Optional[int] = None, motion: Optional[ReferenceMotion] = None,
                 eval_motion: Optional[ReferenceMotion] = None) -> Dict:
    """Train to the iteration budget, resuming from out_dir if a checkpoint exists."""
    init_mode = init_mode or cfg.init
    k = k or cfg.k
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_cfg = train_config_for(cfg)
    env = build_env(cfg, motion)
    init_dist = make_init_dist(init_mode, env.track, k, env.sim.contact.ground_height)
    agent = Agent(env.obs_dim, env.action_dim, train_cfg.hidden, train_cfg.policy_std,
                  rng=np.random.default_rng(seed), normalizer_max_count=train_cfg.normalizer_max_count)
    trainer = Trainer(agent, env, init_dist, train_cfg, seed)

    metrics_path = out_dir / 'metrics.csv'
    checkpoint_path = out_dir / CHECKPOINT_NAME
    rows: List[Dict] = []
    if checkpoint_path.exists():
        checkpoint = load_checkpoint(checkpoint_path)
        restored = init_dist
        if init_dist.learnable and checkpoint.header.get('init_dist'):
            restored = init_dist_from_dict(checkpoint.header['init_dist'], env.track)
        checkpoint.restore(trainer, restored)
        if metrics_path.exists():
            previous = pd.read_csv(metrics_path, float_precision='round_trip')
            rows = previous.head(trainer.iteration).to_dict('records')
        logger.info(f"Resuming {out_dir} from iteration {trainer.iteration}")

    _write_json(out_dir / 'metadata.json', {
        'init': init_mode,
        'k': k,
        'seed': seed,
        'preset': cfg.preset,
        'motion': env.motion.name or cfg.motion,
        'character': env.tree.name,
        'train_config': train_cfg.to_dict(),
    })

    pool = ProcessPoolExecutor(max_workers=train_cfg.workers) if train_cfg.workers > 1 else None
    try:
        while trainer.iteration < train_cfg.iterations:
            rows.append(trainer.train_iteration(pool))
            pd.DataFrame(rows, columns=METRIC_COLUMNS).to_csv(metrics_path, index=False)
            if trainer.iteration % train_cfg.checkpoint_every == 0 or trainer.iteration == train_cfg.iterations:
                save_checkpoint(checkpoint_path, trainer, {'init': init_mode, 'k': k})
    finally:
        if pool is not None:
            pool.shutdown()

    # Final evaluation
    eval_env = build_env(cfg, eval_motion, env.tree) if eval_motion is not None else env
    eval_dist = make_init_dist(cfg.eval_init, eval_env.track, k, eval_env.sim.contact.ground_height)
    report = evaluate_policy(trainer.agent, eval_env, eval_dist, cfg.eval_episodes, deterministic=True, seed=seed)
    _write_json(out_dir / 'eval.json', report.to_dict())
    logger.info(f"Final evaluation of {out_dir}: mean normalized return {report.mean:.4f}")
    return {'iterations': trainer.iteration, 'final_return': report.mean, 'out_dir': str(out_dir)}


def cmd_train(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    cfg.require('character', 'motion')
    if args.init:
        cfg.init = args.init
    # several seeds train side by side under seed<N>/
    for seed in cfg.seeds:
        out_dir = cfg.out_dir if len(cfg.seeds) == 1 else cfg.out_dir / f"seed{seed}"
        summary = run_training(cfg, out_dir, seed, cfg.init, cfg.k)
        logger.info(f"Training finished for seed {seed}: {summary}")
    return EXIT_OK


def cmd_eval(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    cfg.require('character', 'motion')
    checkpoint_path = Path(args.checkpoint) if args.checkpoint else (
        cfg.path(cfg.checkpoint) if cfg.checkpoint else cfg.out_dir / CHECKPOINT_NAME)
    if not checkpoint_path.exists():
        raise ConfigError(f"Checkpoint not found: {checkpoint_path}")
    agent = load_checkpoint(checkpoint_path).agent()
    env = build_env(cfg)
    if agent.obs_dim != env.obs_dim or agent.action_dim != env.action_dim:
        raise ConfigError(f"Checkpoint {checkpoint_path} does not fit character {env.tree.name}")
    dist = make_init_dist(args.init or cfg.eval_init, env.track, cfg.k, env.sim.contact.ground_height)
    episodes = args.episodes or cfg.eval_episodes
    report = evaluate_policy(agent, env, dist, episodes, deterministic=not args.stochastic, seed=cfg.seeds[0])
    result = report.to_dict()
    result['perturbed'] = env.config.perturbation is not None
    _write_json(cfg.out_dir / 'eval.json', result)
    logger.info(f"Evaluation over {episodes} episodes: mean {report.mean:.4f} "
                f"min {report.min:.4f} max {report.max:.4f}")
    return EXIT_OK


# Reconstruction

def cmd_reconstruct(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    cfg.require('character', 'predictions')
    tree = load_character(cfg.path(cfg.character))
    preds = load_predictions(cfg.path(cfg.predictions))
    result = run_reconstruction(tree, preds, ReconConfig.from_dict(cfg.recon),
                                name=Path(cfg.predictions).stem)
    out_dir = cfg.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    save_motion(result.motion, out_dir / 'reconstructed_motion.json')
    result.history.to_csv(out_dir / 'recon_loss.csv', index=False, columns=HISTORY_COLUMNS)
    logger.info(f"l_rec {result.initial.l_rec:.6g} -> {result.final.l_rec:.6g} "
                f"(l_2d {result.final.l_2d:.4g}, l_3d {result.final.l_3d:.4g}, l_sm {result.final.l_sm:.4g})")
    return EXIT_OK


def cmd_synth(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    """Write a synthetic clip and matching noisy predictions."""
    cfg.require('character', 'motion')
    if not cfg.motion.startswith('synth:'):
        raise ConfigError(f"synth needs a 'synth:<clip>' motion, got '{cfg.motion}'")
    clip = cfg.motion.split(':', 1)[1]
    tree = load_character(cfg.path(cfg.character))
    motion = resolve_motion(cfg.motion, tree)
    try:
        preds = synth_predictions(tree, motion, rng=np.random.default_rng(cfg.seeds[0]), **cfg.synth)
    except TypeError as e:
        raise ConfigError(f"Invalid synth options: {e}")
    out_dir = cfg.out_dir
    save_motion(motion, out_dir / f"{clip}_motion.json")
    save_predictions(preds, out_dir / f"{clip}_predictions.json")
    logger.info(f"Wrote synthetic {clip} clip ({motion.num_frames} frames) to {out_dir}")
    return EXIT_OK


# Completion

def load_query_pose(path: Path) -> Pose:
    try:
        data = json.loads(Path(path).read_text())
        return Pose(data['root_pos'], data['root_rot'], data['joints'])
    except FileNotFoundError:
        raise ConfigError(f"Query pose not found: {path}")
    except (KeyError, json.JSONDecodeError) as e:
        raise ConfigError(f"Malformed query pose {path}: {e}")


def cmd_complete(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    cfg.require('character', 'library', 'query')
    tree = load_character(cfg.path(cfg.character))
    library = load_library(cfg.path(cfg.library), tree)
    query = CompletionQuery(load_query_pose(cfg.path(cfg.query)), cfg.duration)
    result = complete_motion(library, tree, query)
    save_completion(result, cfg.out_dir / 'completion.json')
    return EXIT_OK


# Ablations

@dataclass
class AblationRun:
    variant: str
    init: str
    k: int
    seed: int
    source: str = 'reference'

    @property
    def name(self) -> str:
        slug = self.variant.lower().replace(' + ', '_').replace('=', '').replace(' ', '_')
        return f"{slug}_seed{self.seed}"


def plan_ablation(cfg: ExperimentConfig, mode: str) -> List[AblationRun]:
    """Every (variant, seed) run of an ablation, in output order."""
    runs = []
    if mode == 'init':
        variants = cfg.ablation.get('variants', list(INIT_MODES))
        for init in variants:
            runs += [AblationRun(init.upper(), init, cfg.k, s) for s in cfg.seeds]
    elif mode == 'k':
        for k in cfg.ablation.get('ks', [5, 10, 20]):
            runs += [AblationRun(f"k={k}", 'asi', int(k), s) for s in cfg.seeds]
    elif mode == 'recon':
        for init in ('rsi', 'asi'):
            runs += [AblationRun(init.upper(), init, cfg.k, s, 'raw') for s in cfg.seeds]
            runs += [AblationRun(f"{init.upper()} + MR", init, cfg.k, s, 'reconstructed') for s in cfg.seeds]
    else:
        raise ConfigError(f"Unknown ablation mode '{mode}', expected one of {ABLATION_MODES}")
    return runs


def _ablation_job(cfg: ExperimentConfig, run: AblationRun, out_dir: str, motion: Optional[ReferenceMotion],
                  eval_motion: Optional[ReferenceMotion]) -> Dict:
    return run_training(cfg, Path(out_dir), run.seed, run.init, run.k, motion, eval_motion)


def aggregate_curves(frames: Dict[str, List[pd.DataFrame]]) -> pd.DataFrame:
    """Mean and range of the normalized return per variant and iteration."""
    parts = []
    for variant, runs in frames.items():
        if not runs:
            continue
        stacked = pd.concat(runs)
        grouped = stacked.groupby('iteration')['avg_normalized_return']
        part = pd.DataFrame({
            'mean': grouped.mean(),
            'min': grouped.min(),
            'max': grouped.max(),
            'runs': grouped.count(),
        }).reset_index()
        part.insert(0, 'variant', variant)
        parts.append(part)
    if not parts:
        return pd.DataFrame(columns=['variant', 'iteration', 'mean', 'min', 'max', 'runs'])
    return pd.concat(parts, ignore_index=True)[['variant', 'iteration', 'mean', 'min', 'max', 'runs']]


def cmd_ablate(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    cfg.require('character')
    mode = args.mode or cfg.ablation.get('mode', 'init')
    runs = plan_ablation(cfg, mode)
    if mode != 'recon':
        cfg.require('motion')
    out_dir = cfg.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    tree = load_character(cfg.path(cfg.character))

    # Reference motions per source
    motions: Dict[str, Optional[ReferenceMotion]] = {'reference': None}
    eval_motion = None
    if mode == 'recon':
        cfg.require('predictions')
        preds = load_predictions(cfg.path(cfg.predictions))
        motions['raw'] = ReferenceMotion(preds.dt, [p.copy() for p in preds.q3d], preds.cyclic, name='raw')
        motions['reconstructed'] = run_reconstruction(tree, preds, ReconConfig.from_dict(cfg.recon),
                                                      name='reconstructed').motion
        if cfg.motion is not None:
            eval_motion = resolve_motion(cfg.motion, tree, cfg.base)
    skill = Path(cfg.motion).stem if cfg.motion and not cfg.motion.startswith('synth:') else (
        cfg.motion.split(':', 1)[1] if cfg.motion else 'skill')

    workers = min(int(cfg.ablation.get('workers', worker_cap())), len(runs))
    logger.info(f"Ablation '{mode}': {len(runs)} runs on {workers} workers")
    results: Dict[str, Dict] = {}
    if workers <= 1:
        for run in runs:
            try:
                results[run.name] = _ablation_job(cfg, run, str(out_dir / run.name), motions[run.source], eval_motion)
            except Exception as e:
                logger.warning(f"Ablation run {run.name} failed: {e}")
                results[run.name] = {'error': str(e)}
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {run.name: pool.submit(_ablation_job, cfg, run, str(out_dir / run.name),
                                             motions[run.source], eval_motion) for run in runs}
            for name, future in futures.items():
                try:
                    results[name] = future.result()
                except Exception as e:
                    logger.warning(f"Ablation run {name} failed: {e}")
                    results[name] = {'error': str(e)}

    # Summaries
    records, curves = [], {}
    for run in runs:
        result = results[run.name]
        ok = 'error' not in result
        records.append({
            'variant': run.variant,
            'seed': run.seed,
            'status': 'ok' if ok else 'failed',
            'final_return': result.get('final_return', float('nan')),
            'error': result.get('error', ''),
        })
        curves.setdefault(run.variant, [])
        metrics_path = out_dir / run.name / 'metrics.csv'
        if ok and metrics_path.exists():
            curves[run.variant].append(pd.read_csv(metrics_path))
    runs_df = pd.DataFrame(records, columns=['variant', 'seed', 'status', 'final_return', 'error'])
    runs_df.to_csv(out_dir / 'runs.csv', index=False)
    aggregate_curves(curves).to_csv(out_dir / 'curves.csv', index=False)

    finals = runs_df[runs_df['status'] == 'ok'].groupby('variant', sort=False)['final_return'].mean()
    summary = {'Skill': skill}
    for variant in dict.fromkeys(run.variant for run in runs):
        summary[variant] = float(finals.get(variant, float('nan')))
    pd.DataFrame([summary]).to_csv(out_dir / 'summary.csv', index=False)

    failed = int((runs_df['status'] == 'failed').sum())
    if failed:
        logger.warning(f"{failed} of {len(runs)} ablation runs failed; see {out_dir / 'runs.csv'}")
    logger.info(f"Ablation summary: {summary}")
    return EXIT_OK


# Artifact schemas

def _json_type_ok(value, expected: str) -> bool:
    checks = {
        'number': lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
        'integer': lambda v: isinstance(v, int) and not isinstance(v, bool),
        'boolean': lambda v: isinstance(v, bool),
        'string': lambda v: isinstance(v, str),
        'array': lambda v: isinstance(v, list),
        'object': lambda v: isinstance(v, dict),
    }
    return checks[expected](value)


def validate_artifact(path, schema: str) -> List[str]:
    """Problems found checking an emitted CSV or JSON file against a shipped schema."""
    spec = json.loads((SCHEMA_DIR / f"{schema}.json").read_text())
    path = Path(path)
    problems = []
    if spec['format'] == 'csv':
        columns = list(pd.read_csv(path, nrows=0).columns)
        expected = spec['columns']
        if spec.get('exact', False) and columns != expected:
            problems.append(f"{path.name}: columns {columns}, expected {expected}")
        elif columns[:len(expected)] != expected:
            problems.append(f"{path.name}: columns must start with {expected}, got {columns}")
    else:
        data = json.loads(path.read_text())
        for key, expected in spec['required'].items():
            if key not in data:
                problems.append(f"{path.name}: missing field '{key}'")
            elif not _json_type_ok(data[key], expected):
                problems.append(f"{path.name}: field '{key}' is not a {expected}")
    return problems


# CLI

COMMANDS = {
    'reconstruct': cmd_reconstruct,
    'train': cmd_train,
    'eval': cmd_eval,
    'ablate': cmd_ablate,
    'complete': cmd_complete,
    'synth': cmd_synth,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='sfvlab', description='Reconstruct, imitate and complete motions.')
    subparsers = parser.add_subparsers(dest='command', required=True)
    for name in COMMANDS:
        sub = subparsers.add_parser(name)
        sub.add_argument('--config', required=True, help='Experiment config JSON')
        sub.add_argument('--seed', type=int, help='Overrides the config seeds')
        sub.add_argument('--out', help='Overrides the config output directory')
        if name in ('train', 'eval'):
            sub.add_argument('--init', choices=INIT_MODES, help='Initial state distribution')
        if name == 'eval':
            sub.add_argument('--checkpoint', help='Checkpoint file to evaluate')
            sub.add_argument('--episodes', type=int, help='Number of evaluation episodes')
            sub.add_argument('--stochastic', action='store_true', help='Sample actions instead of using the mean')
        if name == 'ablate':
            sub.add_argument('--mode', choices=ABLATION_MODES, help='Ablation to run')
    return parser


def apply_cli_overrides(cfg: ExperimentConfig, args: argparse.Namespace) -> ExperimentConfig:
    if args.seed is not None:
        cfg.seeds = [args.seed]
    if args.out:
        cfg.out = str(Path(args.out).resolve())
    return cfg


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if not e.code else EXIT_USAGE

    setup_logging()
    setup_performance_logging()
    try:
        cfg = apply_cli_overrides(load_experiment(args.config), args)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, MotionFormatError, KinematicsError) as e:
        logger.error(f"{args.command}: {e}")
        return EXIT_USAGE
    except Exception as e:
        logger.exception(f"{args.command} failed: {e}")
        return EXIT_RUNTIME


if __name__ == '__main__':
    sys.exit(main())
