"""
Bottom-up hierarchical training.

Leaf-segment models are trained first; every combined node starts from
the elementwise average of its children's trained weights and trains on
the composition of their data. Nodes of one level are independent and
may train concurrently; levels run strictly in order.
"""

import asyncio
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.core.data import (
    Dataset, SegmentManifest, canonical_json, compose_datasets, composed_id, load_dataset,
    manifest_from_dict, manifest_hash, plan_default_pairing, validate_pairing,
)
from src.core.evaluation import precision_at_k
from src.core.metric import batch_loss
from src.core.numerics import (
    Activation, EmbedderModel, Layer, MlpParams, TrainConfig, average_models, init_embedder,
    mlp_backward, mlp_forward, sgd_step_model,
)
from src.utils.errors import (
    DataError, DegenerateError, FormatError, HemlError, NumericalError, ParseError, ScheduleError, ShapeError, TrainingError,
)
from src.utils.seeding import make_rng, mix_seed

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b'HEMLCKP1'
CHECKPOINT_VERSION = 1
_HEADER_KEYS = ('version', 'node_id', 'name', 'segment_id', 'architecture', 'seed', 'epochs',
                'history', 'best_epoch', 'val_history', 'config')
STORE_INDEX = 'store.json'
BASELINE_KEY = 'baseline'
DIVERGENCE_LIMIT = 1e6
# seed streams that never collide with node ids
BATCH_STREAM = 1 << 40
BASELINE_STREAM = 1 << 41


@dataclass(frozen=True)
class ScheduleNode:
    node_id: int
    name: str
    children: Tuple[int, ...]
    level: int
    leaves: Tuple[str, ...]

    @property
    def segment_id(self) -> str:
        return composed_id(self.leaves)

    @property
    def is_leaf(self) -> bool:
        return not self.children


@dataclass(frozen=True)
class CombinationSchedule:
    nodes: Tuple[ScheduleNode, ...]
    root_id: int

    def node(self, node_id: int) -> ScheduleNode:
        return self.nodes[node_id]

    @property
    def leaves(self) -> List[ScheduleNode]:
        return [n for n in self.nodes if n.is_leaf]

    @property
    def n_levels(self) -> int:
        return self.nodes[self.root_id].level + 1

    def levels(self) -> List[List[int]]:
        grouped: Dict[int, List[int]] = {}
        for node in self.nodes:
            grouped.setdefault(node.level, []).append(node.node_id)
        return [grouped[level] for level in sorted(grouped)]

    def level_order(self) -> List[ScheduleNode]:
        return sorted(self.nodes, key=lambda n: (n.level, n.node_id))

    def to_dict(self) -> dict:
        return {
            'root': self.root_id,
            'nodes': [
                {'id': n.node_id, 'name': n.name, 'children': list(n.children), 'level': n.level}
                for n in self.nodes
            ],
        }


def build_schedule(manifest: SegmentManifest) -> CombinationSchedule:
    if not manifest.segments:
        raise ScheduleError("manifest has no leaf segments")
    pairing = manifest.pairing if manifest.pairing is not None else plan_default_pairing(manifest.segments)
    try:
        validate_pairing(manifest.segments, pairing)
    except ParseError as e:
        raise ScheduleError(f"malformed pairing: {e}") from e

    nodes: List[ScheduleNode] = []
    by_name: Dict[str, ScheduleNode] = {}
    for name in manifest.segments:
        node = ScheduleNode(len(nodes), name, (), 0, (name,))
        nodes.append(node)
        by_name[name] = node
    for entry in pairing:
        children = [by_name[c] for c in entry.children]
        node = ScheduleNode(
            node_id=len(nodes),
            name=entry.name,
            children=tuple(c.node_id for c in children),
            level=max(c.level for c in children) + 1,
            leaves=tuple(leaf for c in children for leaf in c.leaves),
        )
        nodes.append(node)
        by_name[entry.name] = node
    return CombinationSchedule(tuple(nodes), nodes[-1].node_id)


# ---------------------------------------------------------------- checkpoints

@dataclass(frozen=True, eq=False)
class Checkpoint:
    node_id: Union[int, str]
    name: str
    segment_id: str
    model: EmbedderModel
    config: TrainConfig
    seed: int
    history: Tuple[float, ...] = ()
    best_epoch: Optional[int] = None
    val_history: Tuple[float, ...] = ()
    version: int = CHECKPOINT_VERSION

    def header(self) -> dict:
        return {
            'version': self.version,
            'node_id': self.node_id,
            'name': self.name,
            'segment_id': self.segment_id,
            'architecture': self.model.architecture(),
            'seed': self.seed,
            'loss': self.config.loss.value,
            'epochs': self.config.epochs,
            'history': list(self.history),
            'best_epoch': self.best_epoch,
            'val_history': list(self.val_history),
            'config': self.config.to_dict(),
        }

    @property
    def final_loss(self) -> Optional[float]:
        return self.history[-1] if self.history else None


def checkpoint_to_bytes(checkpoint: Checkpoint) -> bytes:
    header = json.dumps(checkpoint.header(), sort_keys=True, separators=(',', ':')).encode()
    params = np.concatenate([checkpoint.model.trunk.flatten(), checkpoint.model.embedder.flatten()])
    return CHECKPOINT_MAGIC + struct.pack('<I', len(header)) + header + params.astype('<f4').tobytes()


def _template(dims: Sequence[int], activations: Sequence[str]) -> MlpParams:
    if len(dims) != len(activations) + 1:
        raise FormatError("architecture dims and activations disagree")
    return MlpParams(tuple(
        Layer(np.zeros((fan_out, fan_in), np.float32), np.zeros(fan_out, np.float32), Activation(act))
        for fan_in, fan_out, act in zip(dims[:-1], dims[1:], activations)
    ))


def checkpoint_from_bytes(raw: bytes, source: str = '<bytes>') -> Checkpoint:
    prefix = len(CHECKPOINT_MAGIC) + 4
    if len(raw) < prefix or raw[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise FormatError(f"{source}: not a HEMLCKP1 checkpoint")
    (header_len,) = struct.unpack_from('<I', raw, len(CHECKPOINT_MAGIC))
    if len(raw) < prefix + header_len:
        raise FormatError(f"{source}: truncated header")
    try:
        header = json.loads(raw[prefix:prefix + header_len].decode())
        if not isinstance(header, dict):
            raise TypeError(f"header is a {type(header).__name__}, not an object")
        missing = [key for key in _HEADER_KEYS if key not in header]
        if missing:
            raise KeyError(f"missing fields {missing}")
        arch = header['architecture']
        trunk = _template(arch['trunk_dims'], arch['trunk_activations'])
        embedder = _template(arch['embedder_dims'], arch['embedder_activations'])
        config = TrainConfig.from_dict(header['config'])
        history = tuple(float(v) for v in header['history'])
        val_history = tuple(float(v) for v in header['val_history'])
        epochs = int(header['epochs'])
    except (ValueError, KeyError, TypeError, HemlError) as e:
        raise FormatError(f"{source}: corrupted header ({e})") from e

    n_params = trunk.size + embedder.size
    body = raw[prefix + header_len:]
    if len(body) != 4 * n_params:
        raise FormatError(f"{source}: expected {4 * n_params} parameter bytes, found {len(body)}")
    values = np.frombuffer(body, dtype='<f4').astype(np.float32)
    if header['version'] != CHECKPOINT_VERSION:
        raise FormatError(f"{source}: unsupported version {header['version']}")
    if len(history) != epochs:
        raise FormatError(f"{source}: history length {len(history)} != epochs {epochs}")
    try:
        model = EmbedderModel(
            trunk.unflatten(values[:trunk.size], np.float32),
            embedder.unflatten(values[trunk.size:], np.float32),
        )
    except (ShapeError, NumericalError) as e:
        raise FormatError(f"{source}: {e}") from e
    return Checkpoint(
        node_id=header['node_id'],
        name=header['name'],
        segment_id=header['segment_id'],
        model=model,
        config=config,
        seed=header['seed'],
        history=history,
        best_epoch=header['best_epoch'],
        val_history=val_history,
        version=header['version'],
    )


def save_checkpoint(path, checkpoint: Checkpoint):
    Path(path).write_bytes(checkpoint_to_bytes(checkpoint))


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError as e:
        raise FormatError(f"checkpoint not found: {path}") from e
    return checkpoint_from_bytes(raw, str(path))


def _node_file(node_id) -> str:
    return f"node_{node_id:03d}.ckpt" if isinstance(node_id, int) else f"{node_id}.ckpt"


@dataclass
class CheckpointStore:
    manifest: SegmentManifest
    schedule: CombinationSchedule
    config: TrainConfig
    checkpoints: Dict[int, Checkpoint] = field(default_factory=dict)
    baseline: Optional[Checkpoint] = None

    @property
    def manifest_hash(self) -> str:
        return manifest_hash(self.manifest)

    def is_complete(self) -> bool:
        return all(n.node_id in self.checkpoints for n in self.schedule.nodes)

    def add(self, checkpoint: Checkpoint):
        if checkpoint.node_id in self.checkpoints:
            raise TrainingError("checkpoint already stored", node_id=checkpoint.node_id)
        self.checkpoints[checkpoint.node_id] = checkpoint

    def get(self, node_id: int) -> Checkpoint:
        try:
            return self.checkpoints[node_id]
        except KeyError:
            raise DataError(f"store has no checkpoint for node {node_id} (incomplete store)") from None

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        files = {}
        for node in self.schedule.nodes:
            name = _node_file(node.node_id)
            save_checkpoint(directory / name, self.get(node.node_id))
            files[str(node.node_id)] = name
        if self.baseline is not None:
            save_checkpoint(directory / _node_file(BASELINE_KEY), self.baseline)
            files[BASELINE_KEY] = _node_file(BASELINE_KEY)
        index = {
            'manifest': self.manifest.canonical(),
            'manifest_hash': self.manifest_hash,
            'manifest_dir': os.path.relpath(self.manifest.base_dir.resolve(), directory.resolve()),
            'schedule': self.schedule.to_dict(),
            'config': self.config.to_dict(),
            'files': files,
        }
        (directory / STORE_INDEX).write_bytes(canonical_json(index))
        logger.info(f"Saved {len(files)} checkpoints to {directory}")

    @classmethod
    def load(cls, directory) -> 'CheckpointStore':
        directory = Path(directory)
        index_path = directory / STORE_INDEX
        if not index_path.is_file():
            raise FormatError(f"{directory} is not a checkpoint store (no {STORE_INDEX})")
        try:
            index = json.loads(index_path.read_text())
            manifest = manifest_from_dict(index['manifest'], (directory / index['manifest_dir']).resolve())
            config = TrainConfig.from_dict(index['config'])
            files = index['files']
        except (ValueError, KeyError, TypeError, HemlError) as e:
            raise FormatError(f"{index_path}: corrupted store index ({e})") from e
        if manifest_hash(manifest) != index['manifest_hash']:
            raise FormatError(f"{index_path}: manifest hash mismatch")

        schedule = build_schedule(manifest)
        store = cls(manifest, schedule, config)
        for node in schedule.nodes:
            name = files.get(str(node.node_id))
            if name is None:
                raise FormatError(f"{index_path}: no checkpoint listed for node {node.node_id} ({node.name})")
            checkpoint = load_checkpoint(directory / name)
            if checkpoint.node_id != node.node_id or checkpoint.segment_id != node.segment_id:
                raise FormatError(f"{directory / name}: checkpoint belongs to {checkpoint.segment_id!r}, "
                                  f"expected node {node.node_id} ({node.segment_id!r})")
            store.add(checkpoint)
        if BASELINE_KEY in files:
            store.baseline = load_checkpoint(directory / files[BASELINE_KEY])
        return store


# ---------------------------------------------------------------- training

def class_balanced_batches(labels: np.ndarray, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    """Shuffle each class, interleave classes round-robin, then cut into batches (no replacement)."""
    pools = [list(rng.permutation(np.flatnonzero(labels == c))) for c in np.unique(labels)]
    order = []
    depth = max(len(pool) for pool in pools)
    for i in range(depth):
        for pool in pools:
            if i < len(pool):
                order.append(pool[i])
    order = np.asarray(order, dtype=np.int64)
    return [order[i:i + batch_size] for i in range(0, order.size, batch_size)]


def _as_model(init) -> Optional[EmbedderModel]:
    if init is None or isinstance(init, EmbedderModel):
        return init
    trunk, embedder = init
    return EmbedderModel(trunk, embedder)


def train_segment(dataset: Dataset, config: TrainConfig, init=None, *, seed: Optional[int] = None,
                  node_id=None, name: Optional[str] = None,
                  val_dataset: Optional[Dataset] = None) -> Checkpoint:
    """Train one node: forward -> mine -> loss -> backward -> SGD, per class-balanced batch."""
    labels = dataset.labels
    if len(dataset) == 0 or np.unique(labels).size < 2:
        raise TrainingError(f"{dataset.segment_id}: training needs at least 2 classes", node_id=node_id)
    seed = config.seed if seed is None else seed
    model = _as_model(init)
    if model is None:
        model = init_embedder(dataset.input_dim, config, seed)
    elif model.input_dim != dataset.input_dim or model.embed_dim != config.embed_dim:
        raise TrainingError(f"initial model {model.input_dim}->{model.embed_dim} incompatible with "
                            f"data dim {dataset.input_dim} / embed_dim {config.embed_dim}", node_id=node_id)

    rng = make_rng(mix_seed(seed, BATCH_STREAM))
    history: List[float] = []
    val_history: List[float] = []
    best_model, best_epoch, best_score = model, None, -1.0
    use_val = val_dataset is not None and len(val_dataset) >= 2

    for epoch in range(config.epochs):
        losses = []
        try:
            for batch in class_balanced_batches(labels, config.batch_size, rng):
                batch_labels = labels[batch]
                if np.unique(batch_labels).size < 2:
                    continue
                embeddings, cache = mlp_forward(model, dataset.features[batch])
                try:
                    loss, grad = batch_loss(embeddings, batch_labels, config)
                except DataError as e:
                    logger.debug(f"node {node_id} epoch {epoch}: skipped batch ({e})")
                    continue
                param_grads, _ = mlp_backward(model, cache, grad)
                model = sgd_step_model(model, param_grads, config.learning_rate)
                losses.append(loss)
        except (NumericalError, ShapeError, DegenerateError) as e:
            raise TrainingError(f"epoch {epoch}: {e}", node_id=node_id) from e

        if not losses:
            raise TrainingError(
                f"epoch {epoch}: no batch produced an update (batch_size={config.batch_size}; every batch "
                f"was single-class or had nothing to mine)", node_id=node_id)
        mean_loss = float(np.mean(losses))
        if not np.isfinite(mean_loss) or mean_loss > DIVERGENCE_LIMIT:
            raise TrainingError(
                f"diverged at epoch {epoch}: mean loss {mean_loss} (lr={config.learning_rate}, "
                f"last batch losses {losses[-3:]})", node_id=node_id)
        history.append(mean_loss)

        if use_val:
            val_embeddings, _ = mlp_forward(model, val_dataset.features)
            score = precision_at_k(val_embeddings, val_dataset.labels, 1)
            val_history.append(score)
            if score > best_score:
                best_model, best_epoch, best_score = model, epoch, score
        logger.debug(f"node {node_id} epoch {epoch}: loss {mean_loss:.6f}",
                     extra={'node_id': node_id, 'epoch': epoch, 'loss': mean_loss,
                            'val_p1': val_history[-1] if use_val else None})

    if not use_val:
        best_model = model
        best_epoch = config.epochs - 1 if config.epochs else None
    return Checkpoint(
        node_id=node_id if node_id is not None else 0,
        name=name or dataset.segment_id,
        segment_id=dataset.segment_id,
        model=best_model,
        config=config,
        seed=seed,
        history=tuple(history),
        best_epoch=best_epoch,
        val_history=tuple(val_history),
    )


def _copy_model(model: EmbedderModel) -> EmbedderModel:
    return EmbedderModel(model.trunk.astype(model.trunk.layers[0].weight.dtype),
                         model.embedder.astype(model.embedder.layers[0].weight.dtype))


def init_from_children(left: Checkpoint, right: Optional[Checkpoint] = None) -> EmbedderModel:
    """Averaged initialization for a combined node; a pass-through node copies its child."""
    if right is None:
        return _copy_model(left.model)
    if not left.model.same_architecture(right.model):
        raise ShapeError(f"cannot average {left.name!r} and {right.name!r}: architectures differ")
    return average_models(left.model, right.model)


class BottomUpTrainer:
    def __init__(self, manifest: SegmentManifest, config: TrainConfig, train_sets: Dict[str, Dataset],
                 val_sets: Optional[Dict[str, Dataset]] = None, jobs: int = 1):
        self.manifest = manifest
        self.config = config
        self.schedule = build_schedule(manifest)
        self.jobs = max(1, int(jobs))
        background = manifest.background_value
        self.train_data = compose_node_datasets(self.schedule, train_sets, background)
        self.val_data = compose_node_datasets(self.schedule, val_sets, background) if val_sets else {}

    def node_seed(self, node_id: int) -> int:
        return mix_seed(self.config.seed, node_id)

    def run(self) -> CheckpointStore:
        return asyncio.run(self._run())

    async def _run(self) -> CheckpointStore:
        store = CheckpointStore(self.manifest, self.schedule, self.config)
        writer = asyncio.Lock()
        slots = asyncio.Semaphore(self.jobs)
        for level, node_ids in enumerate(self.schedule.levels()):
            logger.info(f"Training level {level}: {len(node_ids)} node(s)")
            results = await asyncio.gather(
                *(self._train_node(node_id, store, slots, writer) for node_id in node_ids),
                return_exceptions=True,
            )
            for node_id, result in zip(node_ids, results):
                if isinstance(result, TrainingError):
                    raise result
                if isinstance(result, BaseException):
                    raise TrainingError(str(result), node_id=node_id) from result
        return store

    async def _train_node(self, node_id: int, store: CheckpointStore, slots: asyncio.Semaphore,
                          writer: asyncio.Lock):
        node = self.schedule.node(node_id)
        async with slots:
            init = None
            if not node.is_leaf:
                init = init_from_children(*[store.get(c) for c in node.children])
            logger.info(f"Training node {node_id} ({node.name}) on {len(self.train_data[node_id])} samples")
            checkpoint = await asyncio.to_thread(
                train_segment, self.train_data[node_id], self.config, init,
                seed=self.node_seed(node_id), node_id=node_id, name=node.name,
                val_dataset=self.val_data.get(node_id),
            )
        async with writer:
            store.add(checkpoint)
        logger.info(f"Finished node {node_id} ({node.name}), final loss {checkpoint.final_loss}")
        return checkpoint


def load_split(manifest: SegmentManifest, split: str) -> Dict[str, Dataset]:
    return {segment: load_dataset(manifest, segment, split) for segment in manifest.segments}


def compose_node_datasets(schedule: CombinationSchedule, leaf_sets: Dict[str, Dataset],
                          background_value: float = 0.0) -> Dict[int, Dataset]:
    """Dataset of every schedule node, composed bottom-up from the leaf datasets."""
    data: Dict[int, Dataset] = {}
    for node in schedule.level_order():
        if node.is_leaf:
            if node.name not in leaf_sets:
                raise DataError(f"no data for leaf segment {node.name!r}")
            data[node.node_id] = leaf_sets[node.name]
        else:
            data[node.node_id] = compose_datasets([data[c] for c in node.children], background_value)
    return data


def train_bottom_up(manifest: SegmentManifest, config: TrainConfig, jobs: int = 1,
                    use_validation: bool = True) -> CheckpointStore:
    train_sets = load_split(manifest, 'train')
    val_sets = load_split(manifest, 'val') if use_validation and 'val' in manifest.splits else None
    return BottomUpTrainer(manifest, config, train_sets, val_sets, jobs).run()


def train_flat(manifest: SegmentManifest, config: TrainConfig, use_validation: bool = True) -> Checkpoint:
    """Traditional baseline: one fresh model trained directly on the fully reconstructed data."""
    schedule = build_schedule(manifest)
    order = list(schedule.node(schedule.root_id).leaves)
    train_sets = load_split(manifest, 'train')
    full = compose_datasets([train_sets[s] for s in order], manifest.background_value)
    val = None
    if use_validation and 'val' in manifest.splits:
        val_sets = load_split(manifest, 'val')
        val = compose_datasets([val_sets[s] for s in order], manifest.background_value)
    logger.info(f"Training flat baseline on {full.segment_id}")
    return train_segment(full, config, seed=mix_seed(config.seed, BASELINE_STREAM), node_id=BASELINE_KEY,
                         name=BASELINE_KEY, val_dataset=val)
