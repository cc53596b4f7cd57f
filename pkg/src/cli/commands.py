"""
Command-line surface: gen | train | tree | eval.

Every command returns an exit code: 0 success, 1 runtime or data failure,
2 usage error. Flags override environment keys, which override built-in
defaults.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

from src.core.data import SyntheticMode, SyntheticSpec, canonical_json, compose_segments, load_manifest, write_synthetic
from src.core.database import RunLedger
from src.core.evaluation import DEFAULT_KS, EvalReport, evaluate_node, evaluate_store, format_report_table, reports_to_json
from src.core.hierarchy import CheckpointStore, compose_node_datasets, load_split, train_bottom_up, train_flat
from src.core.numerics import LossName, MarginMode, MinerName, TrainConfig
from src.core.tree import EXPORT_FORMATS, InferenceModel, build_metric_tree, export_tree, feature_importance, load_query, segment_importance
from src.utils.errors import HemlError, UsageError
from src.utils.logging_setup import setup_logging

logger = logging.getLogger(__name__)

IMPLEMENTED_LOSSES = [LossName.TRIPLET.value, LossName.SNR.value, LossName.NTXENT.value]
RUN_SUMMARY = 'run_summary.json'


def _env(name: str, cast: Callable, default):
    raw = os.getenv(name)
    if raw is None or raw == '':
        return default
    try:
        return cast(raw)
    except ValueError:
        raise UsageError(f"environment variable {name}={raw!r} is not a valid {cast.__name__}") from None


@dataclass(frozen=True)
class RunConfig:
    manifest: Optional[Path]
    out: Path
    train: TrainConfig
    verbosity: int = 0
    jobs: int = 1
    ledger: Optional[str] = None

    @classmethod
    def from_args(cls, args: argparse.Namespace) -> 'RunConfig':
        defaults = TrainConfig()
        train = TrainConfig(
            epochs=_pick(args.epochs, 'HEML_EPOCHS', int, defaults.epochs),
            batch_size=_pick(args.batch, 'HEML_BATCH', int, defaults.batch_size),
            learning_rate=_pick(args.lr, 'HEML_LR', float, defaults.learning_rate),
            margin=_pick(args.margin, 'HEML_MARGIN', float, defaults.margin),
            margin_mode=_pick(args.margin_mode, 'HEML_MARGIN_MODE', str, defaults.margin_mode.value),
            loss=_pick(args.loss, 'HEML_LOSS', str, defaults.loss.value),
            miner=_pick(args.miner, 'HEML_MINER', str, defaults.miner.value),
            seed=_pick(args.seed, 'HEML_SEED', int, defaults.seed),
            embed_dim=_pick(args.embed_dim, 'HEML_EMBED_DIM', int, defaults.embed_dim),
        )
        jobs = _pick(args.jobs, 'HEML_JOBS', int, 1)
        if jobs < 1:
            raise UsageError(f"--jobs must be >= 1, got {jobs}")
        return cls(
            manifest=Path(args.manifest),
            out=Path(args.out),
            train=train,
            verbosity=args.verbose,
            jobs=jobs,
            ledger=args.ledger or os.getenv('HEML_LEDGER_PATH') or None,
        )


def _pick(flag, env_key: str, cast: Callable, default):
    return flag if flag is not None else _env(env_key, cast, default)


def _open_ledger(path: Optional[str]) -> Optional[RunLedger]:
    return RunLedger(path) if path else None


# ---------------------------------------------------------------- commands

def cmd_gen(args: argparse.Namespace) -> int:
    spec = SyntheticSpec(
        n_per_class=args.n_per_class,
        n_segments=args.segments,
        input_dim=args.dim,
        noise_sigma=args.noise,
        mode=SyntheticMode(args.mode),
        seed=_pick(args.seed, 'HEML_SEED', int, 1234),
        n_classes=args.classes,
        n_val_per_class=args.n_val_per_class,
        background_value=args.background,
    )
    manifest_path, manifest, datasets = write_synthetic(args.out, spec)
    n_train = len(next(iter(datasets['train'].values())))
    n_val = len(next(iter(datasets['val'].values())))
    print(f"✅ Generated {spec.mode.value} data: n={n_train} train / {n_val} val, dim={spec.input_dim}, "
          f"segments={len(manifest.segments)}, seed={spec.seed}")
    print(f"📝 Manifest: {manifest_path}")
    return 0


def _summary_ks(ks: Sequence[int], n: int) -> List[int]:
    return [k for k in sorted(set(ks)) if 1 <= k <= n - 1]


def cmd_train(args: argparse.Namespace) -> int:
    run = RunConfig.from_args(args)
    manifest = load_manifest(run.manifest)
    use_validation = not args.no_validation
    store = train_bottom_up(manifest, run.train, jobs=run.jobs, use_validation=use_validation)
    if args.baseline:
        store.baseline = train_flat(manifest, run.train, use_validation=use_validation)
    store.save(run.out)

    split = 'val' if 'val' in manifest.splits else 'train'
    node_data = compose_node_datasets(store.schedule, load_split(manifest, split), manifest.background_value)
    summary_nodes = []
    for node in store.schedule.level_order():
        checkpoint = store.get(node.node_id)
        dataset = node_data[node.node_id]
        entry = _node_summary(checkpoint, dataset, args.k, node.level)
        summary_nodes.append(entry)
        print(_loss_line(entry))
    summary = {
        'manifest_hash': store.manifest_hash,
        'config': run.train.to_dict(),
        'split': split,
        'nodes': summary_nodes,
    }
    if store.baseline is not None:
        root = store.schedule.node(store.schedule.root_id)
        summary['baseline'] = _node_summary(store.baseline, node_data[root.node_id], args.k, root.level)
        print(_loss_line(summary['baseline']))
    (run.out / RUN_SUMMARY).write_bytes(canonical_json(summary))

    ledger = _open_ledger(run.ledger)
    if ledger is not None:
        run_id = ledger.start_run('train', store.manifest_hash, run.train.seed, run.train.to_dict(), str(run.out))
        if run_id is not None:
            for checkpoint in store.checkpoints.values():
                ledger.add_node_result(run_id, checkpoint)
            if store.baseline is not None:
                ledger.add_node_result(run_id, store.baseline)
    print(f"✅ Trained {len(store.checkpoints)} nodes, store written to {run.out}")
    return 0


def _node_summary(checkpoint, dataset, ks: Sequence[int], level: int) -> dict:
    usable = _summary_ks(ks, len(dataset))
    precisions = {}
    if usable:
        precisions = evaluate_node(checkpoint, dataset, usable, level).precisions
    return {
        'node_id': checkpoint.node_id,
        'name': checkpoint.name,
        'level': level,
        'final_loss': checkpoint.final_loss,
        'best_epoch': checkpoint.best_epoch,
        'precision': {str(k): v for k, v in precisions.items()},
    }


def _loss_line(entry: dict) -> str:
    loss = entry['final_loss']
    loss_text = f"{loss:.6f}" if loss is not None else "n/a"
    p1 = entry['precision'].get('1')
    p1_text = f", P@1 {p1:.3f}" if p1 is not None else ""
    return f"node {entry['node_id']} ({entry['name']}): final loss {loss_text}{p1_text}"


def cmd_tree(args: argparse.Namespace) -> int:
    store = CheckpointStore.load(args.store)
    manifest = store.manifest
    query_a = load_query(args.query_a, manifest.segments, args.row_a, manifest.input_dim)
    query_b = load_query(args.query_b, manifest.segments, args.row_b, manifest.input_dim)
    ids = (f"{args.query_a}#{args.row_a}", f"{args.query_b}#{args.row_b}")
    tree = build_metric_tree(store, query_a, query_b, ids)

    out = Path(args.out) if args.out else Path(args.store)
    out.mkdir(parents=True, exist_ok=True)
    for fmt in dict.fromkeys(args.format):
        path = out / f"tree.{fmt}"
        path.write_bytes(export_tree(tree, fmt))
        print(f"📝 Wrote {path}")
    print(f"z = {tree.z:.6f}")
    print(f"root normalized distance {tree.root.normalized:.3f}")

    if args.importance:
        root = store.schedule.node(store.schedule.root_id)
        inference = InferenceModel.from_checkpoint(store.get(root.node_id))
        composed_a = compose_segments([query_a[s] for s in root.leaves], manifest.background_value)
        composed_b = compose_segments([query_b[s] for s in root.leaves], manifest.background_value)
        wrt = 'b' if args.swap else 'a'
        importance = feature_importance(inference, composed_a, composed_b, wrt=wrt)
        source = query_b if args.swap else query_a
        scores = segment_importance(importance, {s: source[s].mask for s in root.leaves})
        print(f"Feature importance at root (w.r.t. query {wrt}):")
        for segment, score in scores.items():
            print(f"  {segment}: {score:+.6f}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    store = CheckpointStore.load(args.store)
    manifest = store.manifest
    node_data = compose_node_datasets(store.schedule, load_split(manifest, args.split), manifest.background_value)
    reports: List[EvalReport] = evaluate_store(store, node_data, args.k)
    if store.baseline is not None:
        root = store.schedule.node(store.schedule.root_id)
        reports.append(evaluate_node(store.baseline, node_data[root.node_id], args.k, root.level + 1))
    print(format_report_table(reports), end='')

    out = Path(args.out) if args.out else Path(args.store)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"eval_{args.split}.json").write_bytes(reports_to_json(reports))

    ledger = _open_ledger(args.ledger or os.getenv('HEML_LEDGER_PATH') or None)
    if ledger is not None:
        run_id = ledger.start_run('eval', store.manifest_hash, store.config.seed, store.config.to_dict(), str(out))
        if run_id is not None:
            for report in reports:
                ledger.add_eval_report(run_id, report, args.split)
    return 0


COMMANDS: Dict[str, Callable[[argparse.Namespace], int]] = {
    'gen': cmd_gen,
    'train': cmd_train,
    'tree': cmd_tree,
    'eval': cmd_eval,
}


# ---------------------------------------------------------------- parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"❌ {self.prog}: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog='heml', description='Hierarchical explainable metric learning')
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('-v', '--verbose', action='count', default=0, help='-v JSON logs at INFO, -vv DEBUG')
    common.add_argument('--seed', type=int, default=None, help='master seed (env HEML_SEED, default 1234)')
    sub = parser.add_subparsers(dest='command', required=True, parser_class=_Parser)

    gen = sub.add_parser('gen', parents=[common], help='generate synthetic segmented data')
    gen.add_argument('--out', required=True)
    gen.add_argument('--mode', choices=[m.value for m in SyntheticMode], default=SyntheticMode.PROTOTYPE.value)
    gen.add_argument('--n-per-class', type=int, default=100)
    gen.add_argument('--n-val-per-class', type=int, default=None)
    gen.add_argument('--segments', type=int, default=4)
    gen.add_argument('--dim', type=int, default=16)
    gen.add_argument('--noise', type=float, default=0.1)
    gen.add_argument('--classes', type=int, default=2)
    gen.add_argument('--background', type=float, default=0.0)

    train = sub.add_parser('train', parents=[common], help='train the hierarchy bottom-up')
    train.add_argument('--manifest', required=True)
    train.add_argument('--out', required=True)
    train.add_argument('--epochs', type=int, default=None)
    train.add_argument('--lr', type=float, default=None)
    train.add_argument('--batch', type=int, default=None)
    train.add_argument('--margin', type=float, default=None)
    train.add_argument('--margin-mode', choices=[m.value for m in MarginMode], default=None)
    train.add_argument('--loss', choices=IMPLEMENTED_LOSSES, default=None)
    train.add_argument('--miner', choices=[m.value for m in MinerName], default=None)
    train.add_argument('--embed-dim', type=int, default=None)
    train.add_argument('--jobs', type=int, default=None)
    train.add_argument('--k', type=int, nargs='+', default=list(DEFAULT_KS))
    train.add_argument('--baseline', action='store_true', help='also train the flat single-model baseline')
    train.add_argument('--no-validation', action='store_true', help='keep the last epoch instead of the best val P@1')
    train.add_argument('--ledger', default=None, help='SQLite run ledger (env HEML_LEDGER_PATH)')

    tree = sub.add_parser('tree', parents=[common], help='build and export the metric tree of two queries')
    tree.add_argument('--store', required=True)
    tree.add_argument('--query-a', required=True)
    tree.add_argument('--row-a', type=int, default=0)
    tree.add_argument('--query-b', required=True)
    tree.add_argument('--row-b', type=int, default=0)
    tree.add_argument('--format', choices=list(EXPORT_FORMATS), nargs='+', default=['json'])
    tree.add_argument('--out', default=None)
    tree.add_argument('--importance', action='store_true', help='print root feature importance per segment')
    tree.add_argument('--swap', action='store_true', help='importance w.r.t. query b')

    ev = sub.add_parser('eval', parents=[common], help='Precision@K per node')
    ev.add_argument('--store', required=True)
    ev.add_argument('--split', default='val')
    ev.add_argument('--k', type=int, nargs='+', default=list(DEFAULT_KS))
    ev.add_argument('--out', default=None)
    ev.add_argument('--ledger', default=None)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 0

    setup_logging(args.verbose, os.getenv('HEML_LOG_FILE') or None)
    try:
        return COMMANDS[args.command](args)
    except HemlError as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"❌ {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"❌ {e}", file=sys.stderr)
        return 1
