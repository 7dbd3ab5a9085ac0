"""
Command-line pipeline for the grid-world navigation agent.

Usage:
    python -m labelnav.cli gen-scenes --out ./runs/toy
    python -m labelnav.cli pretrain-tfg --out ./runs/toy
    python -m labelnav.cli pretrain-uoi --out ./runs/toy
    python -m labelnav.cli train --out ./runs/toy --flags full
    python -m labelnav.cli eval --out ./runs/toy
    python -m labelnav.cli ablate --out ./runs/toy --variants baseline,uot,tfg_uoi,mcfm,full
    python -m labelnav.cli report --out ./runs/toy --with-random
"""

import glob
import logging
import os
import sys
from datetime import datetime
from typing import Callable, Dict, Optional

import click

from labelnav import storage
from labelnav.config import (REPORTS_DIR, SCENE_DIAGNOSIS_FILE, TABLES_DIR, TFG_FILE, TRACES_DIR,
                             TRAIN_HISTORY_FILE, UOI_DATASET_FILE, UOI_FILE, Settings, load_settings)
from labelnav.errors import CheckpointMismatchError, LabelnavError
from labelnav.evalharness import (PRESETS, RunReport, ablation_table, distance_table, eval_splits,
                                  evaluate_random, evaluation_episodes, parse_flags, run_ablation, size_table,
                                  split_table)
from labelnav.gridworld import ATTRIBUTE_VOCABULARY, SPLIT_NAMES, connected, default_split, generate_scenes
from labelnav.metatrain import MetaLearner, NavigationContext, flags_name
from labelnav.perception import ClassFeatureOracle, TargetFeatureGenerator
from labelnav.uoi import UoiModel, build_pretraining_sets, uoi_pretrain


def setup_logging(output_dir: str, command: str):
    """
    Set up logging to a timestamped file in the output directory and to stdout.

    Args:
        output_dir: Directory for log files
        command: Name of the pipeline stage, used in the log file name
    """
    os.makedirs(output_dir, exist_ok=True)

    timestamp = datetime.now().strftime('%Y%m%d_%H%M%S')
    log_path = os.path.join(output_dir, f'labelnav_{command}_{timestamp}.log')

    logging.basicConfig(
        level=logging.INFO,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[
            logging.FileHandler(log_path),
            logging.StreamHandler(sys.stdout)
        ],
        force=True,
    )

    logger = logging.getLogger(__name__)
    logger.info(f"Starting labelnav {command}")
    logger.info(f"Log file: {log_path}")
    return logger


def log_summary(logger: logging.Logger, title: str, lines: Dict[str, object]):
    logger.info("=" * 80)
    logger.info(title)
    logger.info("=" * 80)
    for key, value in lines.items():
        logger.info(f"{key}: {value}")
    logger.info("=" * 80)


def resolve_settings(config_path: Optional[str]) -> Settings:
    try:
        return load_settings(config_path)
    except ValueError as e:
        print(f"Configuration error: {e}", file=sys.stderr)
        sys.exit(1)


def run_stage(command: str, output_dir: str, body: Callable[[logging.Logger], None]):
    """Run one pipeline stage with logging and the shared error handling."""
    logger = setup_logging(output_dir, command)
    try:
        body(logger)
        logger.info(f"{command} completed successfully")
    except KeyboardInterrupt:
        logger.warning("Interrupted by user")
        sys.exit(1)
    except (LabelnavError, ValueError, FileNotFoundError) as e:
        logger.error(f"{command} failed with error: {e}", exc_info=True)
        sys.exit(1)


def load_context(output_dir: str, settings: Settings, need_uoi: bool) -> NavigationContext:
    """Scenes, oracle and (when needed) the pretrained identifier from an output directory."""
    split, scene_sets, world_seed = storage.load_scenes(output_dir)
    settings = settings.replace('world', seed=world_seed)
    f = settings.features
    oracle = ClassFeatureOracle(split, f.feature_dim, f.relation_dim, f.noise_ratio, seed=world_seed)
    scenes = {s.scene_id: s for kind in scene_sets.values() for s in kind}
    uoi, bank = None, None
    if need_uoi:
        tfg = storage.load_tfg(os.path.join(output_dir, TFG_FILE))
        uoi = storage.load_uoi(os.path.join(output_dir, UOI_FILE))
        bank = tfg.bank(split)
    return NavigationContext(settings, split, scenes, oracle, uoi, bank)


def write_report(output_dir: str, name: str, report: RunReport, subdir: str = ''):
    storage.write_json(os.path.join(output_dir, REPORTS_DIR, subdir, f'{name}.json'), report.to_dict())
    if report.traces:
        storage.write_jsonl(os.path.join(output_dir, TRACES_DIR, subdir, f'{name}.jsonl'), report.traces)


def common_options(f):
    f = click.option('--out', 'output_dir', default='./output', show_default=True,
                     help='Directory for every file the stage reads and writes')(f)
    f = click.option('--seed', type=int, default=None, help='Override the stage seed')(f)
    f = click.option('--config', 'config_path', type=click.Path(), default=None,
                     help='INI file overriding .env and built-in defaults')(f)
    return f


@click.group()
def cli():
    """Zero-shot object navigation in a deterministic grid world."""


@cli.command('gen-scenes')
@common_options
def gen_scenes(config_path, seed, output_dir):
    """Generate train, val and test scenes."""
    settings = resolve_settings(config_path)

    def body(logger):
        world = settings.world if seed is None else settings.replace('world', seed=seed).world
        split = default_split(world.known_classes, world.unknown_classes, world.unseen_classes)
        scene_sets = generate_scenes(world, split)
        storage.save_scenes(output_dir, split, scene_sets, world.seed)

        diagnosis = {}
        for kind, scenes in scene_sets.items():
            free = [len(s.free_cells()) for s in scenes]
            diagnosis[kind] = {
                'scenes': len(scenes),
                'walls': sum(len(s.walls) for s in scenes),
                'free_cells_min': min(free) if free else 0,
                'free_cells_max': max(free) if free else 0,
                'all_connected': all(connected(s.width, s.height, s.walls) for s in scenes),
                'classes': sorted({c for s in scenes for c in s.classes_present()}),
            }
        storage.write_json(os.path.join(output_dir, SCENE_DIAGNOSIS_FILE),
                           {'world_seed': world.seed, 'split': storage.split_to_dict(split), 'kinds': diagnosis})
        storage.save_settings_snapshot(output_dir, settings.replace('world', seed=world.seed))
        log_summary(logger, "SCENE SUMMARY", {
            f"{kind} scenes": f"{d['scenes']} (connected: {d['all_connected']})" for kind, d in diagnosis.items()
        })

    run_stage('gen-scenes', output_dir, body)


@cli.command('pretrain-tfg')
@common_options
def pretrain_tfg(config_path, seed, output_dir):
    """Fit the target feature generator on the known classes."""
    settings = resolve_settings(config_path)

    def body(logger):
        split, _, world_seed = storage.load_scenes(output_dir)
        f = settings.features
        oracle = ClassFeatureOracle(split, f.feature_dim, f.relation_dim, f.noise_ratio, seed=world_seed)
        tfg = TargetFeatureGenerator(len(ATTRIBUTE_VOCABULARY), f.tfg_hidden, f.map_rows, f.feature_dim,
                                     seed=world_seed if seed is None else seed)
        history = tfg.train(split.known, oracle, f.tfg_epochs)
        storage.save_tfg(os.path.join(output_dir, TFG_FILE), tfg, history)
        log_summary(logger, "TARGET FEATURE GENERATOR", {
            'Known classes': len(split.known),
            'Epochs': f.tfg_epochs,
            'Final loss': f"{history[-1]:.6f}" if history else 'n/a',
        })

    run_stage('pretrain-tfg', output_dir, body)


@cli.command('pretrain-uoi')
@common_options
def pretrain_uoi(config_path, seed, output_dir):
    """Pretrain the unlabeled object identifier and keep the best-ISR epoch."""
    settings = resolve_settings(config_path)

    def body(logger):
        split, scene_sets, world_seed = storage.load_scenes(output_dir)
        f, u = settings.features, settings.uoi
        world = settings.replace('world', seed=world_seed).world
        run_seed = settings.meta.seed if seed is None else seed
        oracle = ClassFeatureOracle(split, f.feature_dim, f.relation_dim, f.noise_ratio, seed=world_seed)
        tfg = storage.load_tfg(os.path.join(output_dir, TFG_FILE))
        bank = tfg.bank(split)

        held_out_scenes = scene_sets.get('val') or scene_sets['test']
        train_set, held_out = build_pretraining_sets(scene_sets['train'], held_out_scenes, oracle, u.train_frames,
                                                     u.val_frames, run_seed, world, f.map_rows)
        storage.save_frame_dataset(os.path.join(output_dir, UOI_DATASET_FILE),
                                   {'train': train_set, 'held_out': held_out}, run_seed)

        model = UoiModel(f.map_rows, f.feature_dim, f.relation_dim, len(split.unknown), u, run_seed)
        result = uoi_pretrain(model, train_set, held_out, bank, u, run_seed, show_progress=True)
        storage.save_uoi(os.path.join(output_dir, UOI_FILE), model, result.isr, result.losses, result.best_epoch)
        storage.write_csv(
            os.path.join(output_dir, TABLES_DIR, 'isr_curve.csv'),
            ['epoch', 'loss', 'isr', 'selected'],
            [[i + 1, loss, isr, int(i + 1 == result.best_epoch)]
             for i, (loss, isr) in enumerate(zip(result.losses, result.isr))],
        )
        log_summary(logger, "UOI PRETRAINING", {
            'Training frames': len(train_set),
            'Held-out frames': len(held_out),
            'Selected epoch': result.best_epoch,
            'Held-out ISR': f"{result.isr[result.best_epoch - 1]:.4f}",
        })

    run_stage('pretrain-uoi', output_dir, body)


@cli.command('train')
@common_options
@click.option('--flags', 'flags_text', default='full', show_default=True,
              help='Ablation preset, optionally followed by flag overrides')
@click.option('--episodes', type=int, default=None, help='Override [meta] episodes')
@click.option('--resume', is_flag=True, help='Continue from the checkpoint in --out')
def train(config_path, seed, output_dir, flags_text, episodes, resume):
    """Meta-train the agent and write a checkpoint."""
    settings = resolve_settings(config_path)

    def body(logger):
        flags = parse_flags(flags_text)
        context = load_context(output_dir, settings, flags.use_tfg_uoi)
        path = storage.checkpoint_path(output_dir)
        if resume and os.path.exists(path):
            checkpoint = storage.load_checkpoint(path)
            if checkpoint.flags != flags.training_flags:
                raise CheckpointMismatchError(
                    f"Checkpoint was trained with '{flags_name(checkpoint.flags)}', not '{flags_name(flags)}'")
            learner = MetaLearner.from_checkpoint(context, checkpoint)
        else:
            run_seed = context.settings.meta.seed if seed is None else seed
            learner = MetaLearner(context, flags.training_flags, seed=run_seed)

        result = learner.train(episodes, show_progress=True)
        storage.save_checkpoint(path, learner.checkpoint())
        storage.write_jsonl(os.path.join(output_dir, TRAIN_HISTORY_FILE), result.history)
        storage.save_settings_snapshot(output_dir, context.settings)
        log_summary(logger, "META-TRAINING", {
            'Flags': flags_name(flags),
            'Episodes this run': len(result.history),
            'Episodes total': learner.episodes_done,
            'Training SR': f"{result.success_rate():.4f}",
            'Checkpoint digest': learner.store.digest(),
        })

    run_stage('train', output_dir, body)


@cli.command('eval')
@common_options
@click.option('--flags', 'flags_text', default=None,
              help='Evaluation flags (defaults to the checkpoint flags)')
@click.option('--checkpoint', 'checkpoint_file', type=click.Path(), default=None,
              help='Checkpoint file (defaults to the one in --out)')
@click.option('--episodes', type=int, default=None, help='Override [eval] episodes_per_split')
def evaluate(config_path, seed, output_dir, flags_text, checkpoint_file, episodes):
    """Evaluate a checkpoint on known, unknown and unseen targets."""
    settings = resolve_settings(config_path)

    def body(logger):
        checkpoint = storage.load_checkpoint(checkpoint_file or storage.checkpoint_path(output_dir))
        flags = parse_flags(flags_text) if flags_text else checkpoint.flags
        context = load_context(output_dir, settings, flags.use_tfg_uoi)
        learner = MetaLearner.from_checkpoint(context, checkpoint, flags)
        seeds = (seed,) if seed is not None else context.settings.eval.seeds
        count = episodes or context.settings.eval.episodes_per_split
        name = flags_name(flags)
        report = eval_splits(learner, context.scenes_of('test'), count, seeds, name, show_progress=True)
        write_report(output_dir, name, report)
        storage.save_episode_sets(output_dir, evaluation_episodes(context.scenes_of('test'), context.split, count,
                                                                  seeds, context.settings.world))
        storage.write_csv(os.path.join(output_dir, TABLES_DIR, f'{name}_splits.csv'), *split_table({name: report}))
        log_summary(logger, f"EVALUATION ({name})", {
            **{f"{s} SR/SPL": f"{v['sr_mean']:.4f}±{v['sr_std']:.4f} / {v['spl_mean']:.4f}±{v['spl_std']:.4f}"
               for s, v in report.splits.items()},
            'ISR': f"{report.isr:.4f}" if report.isr is not None else 'n/a',
            'Report hash': report.content_hash(),
        })

    run_stage('eval', output_dir, body)


@cli.command('ablate')
@common_options
@click.option('--variants', default=','.join(PRESETS), show_default=True,
              help='Comma-separated presets to train and evaluate')
@click.option('--episodes', type=int, default=None, help='Override [eval] episodes_per_split')
@click.option('--train-episodes', type=int, default=None, help='Override [meta] episodes per variant')
def ablate(config_path, seed, output_dir, variants, episodes, train_episodes):
    """Train and evaluate every ablation variant on the same episodes."""
    settings = resolve_settings(config_path)

    def body(logger):
        names = [v.strip() for v in variants.split(',') if v.strip()]
        unknown = [v for v in names if v not in PRESETS]
        if unknown:
            raise ValueError(f"Unknown ablation variants: {', '.join(unknown)}")
        need_uoi = any(PRESETS[v].use_tfg_uoi for v in names)
        base = settings if seed is None else settings.replace('meta', seed=seed)
        context = load_context(output_dir, base, need_uoi)
        count = episodes or context.settings.eval.episodes_per_split
        reports = run_ablation(context, names, count, context.settings.eval.seeds, train_episodes,
                               show_progress=True)
        for name, report in reports.items():
            write_report(output_dir, name, report, 'ablation')
        storage.write_csv(os.path.join(output_dir, TABLES_DIR, 'ablation.csv'), *ablation_table(reports))
        log_summary(logger, "ABLATION", {
            name: ", ".join(f"{s} SR {v['sr_mean']:.4f}" for s, v in r.splits.items())
            for name, r in reports.items()
        })

    run_stage('ablate', output_dir, body)


@cli.command('report')
@common_options
@click.option('--with-random', is_flag=True, help='Add a random-walk row evaluated on the same episodes')
@click.option('--episodes', type=int, default=None, help='Override [eval] episodes_per_split for the random row')
def report(config_path, seed, output_dir, with_random, episodes):
    """Collect saved reports into comparison tables."""
    settings = resolve_settings(config_path)

    def body(logger):
        def read_reports(pattern: str) -> Dict[str, RunReport]:
            out = {}
            for path in sorted(glob.glob(pattern)):
                name = os.path.splitext(os.path.basename(path))[0]
                out[name] = RunReport.from_dict(storage.read_json(path))
            return out

        evaluations = read_reports(os.path.join(output_dir, REPORTS_DIR, '*.json'))
        ablations = read_reports(os.path.join(output_dir, REPORTS_DIR, 'ablation', '*.json'))
        if with_random:
            split, scene_sets, world_seed = storage.load_scenes(output_dir)
            resolved = settings.replace('world', seed=world_seed)
            seeds = (seed,) if seed is not None else resolved.eval.seeds
            count = episodes or resolved.eval.episodes_per_split
            saved = storage.load_episode_sets(output_dir) if seed is None and episodes is None else {}
            if saved and all(set(by_split) == set(SPLIT_NAMES) for by_split in saved.values()):
                seeds = tuple(saved)
                count = len(next(iter(saved.values()))['known'])
                logger.info(f"Random walker reuses the evaluated episodes ({len(seeds)} seeds, {count} per split)")
            else:
                saved = None
            random_report = evaluate_random(scene_sets['test'], split, resolved, count, seeds, show_progress=True,
                                            episode_sets=saved)
            write_report(output_dir, 'random', random_report)
            evaluations = {'random': random_report, **{k: v for k, v in evaluations.items() if k != 'random'}}
        if not evaluations and not ablations:
            raise FileNotFoundError(f"No reports under {os.path.join(output_dir, REPORTS_DIR)}")

        tables = os.path.join(output_dir, TABLES_DIR)
        everything = {**ablations, **evaluations}
        storage.write_csv(os.path.join(tables, 'splits.csv'), *split_table(everything))
        storage.write_csv(os.path.join(tables, 'distance.csv'), *distance_table(everything))
        storage.write_csv(os.path.join(tables, 'size.csv'), *size_table(everything))
        if ablations:
            storage.write_csv(os.path.join(tables, 'ablation.csv'), *ablation_table(ablations))
        gt_rows = {k: v for k, v in everything.items() if k in ('full', 'gt_cls')}
        if len(gt_rows) == 2:
            storage.write_csv(os.path.join(tables, 'gt_cls.csv'), *split_table(gt_rows))
        summary = {
            'Evaluation reports': len(evaluations),
            'Ablation reports': len(ablations),
            'Tables': tables,
        }
        history_path = os.path.join(output_dir, TRAIN_HISTORY_FILE)
        if os.path.exists(history_path):
            history = storage.read_jsonl(history_path)
            summary['Training episodes'] = len(history)
            if history:
                summary['Training SR'] = f"{sum(row['success'] for row in history) / len(history):.4f}"
        log_summary(logger, "REPORT", summary)

    run_stage('report', output_dir, body)


if __name__ == '__main__':
    cli()
