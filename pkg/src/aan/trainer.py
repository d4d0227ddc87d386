"""End-to-end optimization: epochs, plateau schedule, checkpoints, evaluation.

Training is a pure function of (corpus bytes, config): batch order, crops
and prompt draws derive from (seed, epoch), so two runs agree bitwise in
float64 mode and a resumed run continues exactly where the uninterrupted
one would have been.  Epoch log records contain only deterministic fields;
wall-clock timing is reported separately.
"""

from __future__ import annotations

import hashlib
import json
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor as tn
from .attributes import select_anchor_prompt
from .data import CorpusIndex, load_split, make_batches
from .graph import (
    CoOccurrencePrior,
    ModelConfig,
    ModelState,
    SchedulerState,
    build_prior,
    config_from_dict,
    forward,
    init_model_state,
    total_loss,
)
from .metrics import EvalRun, VideoEval
from .optim import AdamState, adam_step, clip_global_norm, zero_grads

CHECKPOINT_MAGIC = b"AANC"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """A checkpoint file is malformed or incompatible with expectations."""


class NonFiniteLossError(RuntimeError):
    """A batch produced a non-finite loss; training must abort."""


@dataclass
class TrainConfig:
    """Everything a training run depends on besides the corpus itself."""

    learning_rate: float = 1e-4
    batch_size: int = 32
    plateau_factor: float = 0.5
    plateau_patience: int = 8
    max_epochs: int = 50
    seed: int = 0
    max_frames: int | None = None
    grad_clip: float | None = None
    attribute_weight: float = 1.0
    hidden_dim: int = 256
    n_blocks: int = 5
    n_heads: int = 4
    kernel_size: int = 3
    ablation: str = "full"
    disable_attention: bool = False
    disable_temporal: bool = False
    normalize_anchors: bool = False
    dtype: str = "float64"
    # optional expectations, validated against the corpus when set
    input_dim: int | None = None
    n_attributes: int | None = None
    n_classes: int | None = None

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 < self.plateau_factor < 1.0:
            raise ValueError("plateau_factor must be in (0, 1)")
        if self.plateau_patience < 1:
            raise ValueError("plateau_patience must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        self.model_config(self.input_dim or 1, self.n_attributes or 1, self.n_classes or 1)

    def model_config(self, input_dim: int, n_attributes: int, n_classes: int) -> ModelConfig:
        for name, given, actual in (("input_dim", self.input_dim, input_dim),
                                    ("n_attributes", self.n_attributes, n_attributes),
                                    ("n_classes", self.n_classes, n_classes)):
            if given is not None and given != actual:
                raise ValueError(f"config expects {name}={given} but the corpus has {actual}")
        cfg = ModelConfig(
            n_attributes=n_attributes, n_classes=n_classes, input_dim=input_dim,
            hidden_dim=self.hidden_dim, n_blocks=self.n_blocks, n_heads=self.n_heads,
            kernel_size=self.kernel_size, attribute_weight=self.attribute_weight,
            normalize_anchors=self.normalize_anchors, ablation=self.ablation,
            disable_attention=self.disable_attention, disable_temporal=self.disable_temporal,
            dtype=self.dtype,
        )
        cfg.validate()
        return cfg

    @classmethod
    def desk_profile(cls, **overrides) -> "TrainConfig":
        """Laptop-scale defaults: small dims, short videos, quick epochs."""
        values = dict(hidden_dim=16, n_blocks=2, n_heads=4, batch_size=8,
                      max_frames=64, learning_rate=5e-3)
        values.update(overrides)
        return cls(**values)

    @classmethod
    def paper_profile(cls, **overrides) -> "TrainConfig":
        """Published operating point (needs external 768-d features)."""
        values = dict(hidden_dim=256, n_blocks=5, n_heads=4, batch_size=32,
                      learning_rate=1e-4)
        values.update(overrides)
        return cls(**values)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        doc = dict(doc)
        profile = doc.pop("profile", None)
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if profile == "desk":
            return cls.desk_profile(**doc)
        if profile == "paper":
            return cls.paper_profile(**doc)
        if profile is not None:
            raise ValueError(f"unknown profile {profile!r}")
        return cls(**doc)


# ---------------------------------------------------------------------------
# plateau schedule
# ---------------------------------------------------------------------------

IMPROVEMENT_EPS = 1e-6


class PlateauScheduler:
    """Multiply the rate by `factor` after `patience` epochs without improvement."""

    def __init__(self, adam: AdamState, state: SchedulerState,
                 factor: float = 0.5, patience: int = 8):
        self.adam = adam
        self.state = state
        self.factor = factor
        self.patience = patience

    def step(self, value: float) -> float:
        if value < self.state.best_value - IMPROVEMENT_EPS:
            self.state.best_value = value
            self.state.num_bad_epochs = 0
        else:
            self.state.num_bad_epochs += 1
            if self.state.num_bad_epochs >= self.patience:
                self.adam.learning_rate *= self.factor
                self.state.num_bad_epochs = 0
        return self.adam.learning_rate


def plateau_scheduler(history, learning_rate: float, factor: float = 0.5,
                      patience: int = 8) -> float:
    """Replay a validation-loss history through the plateau rule."""
    adam = AdamState(learning_rate=learning_rate)
    sched = PlateauScheduler(adam, SchedulerState(), factor=factor, patience=patience)
    for value in history:
        sched.step(value)
    return adam.learning_rate


# ---------------------------------------------------------------------------
# epochs
# ---------------------------------------------------------------------------

@dataclass
class EpochReport:
    epoch: int
    mode: str
    mean_total: float
    mean_action: float
    mean_attribute: float
    video_count: int
    learning_rate: float
    duration_s: float = 0.0       # excluded from determinism comparisons

    def log_record(self) -> dict:
        """Deterministic fields only (what goes into the epoch log)."""
        return {
            "epoch": self.epoch,
            "mode": self.mode,
            "mean_total": self.mean_total,
            "mean_action": self.mean_action,
            "mean_attribute": self.mean_attribute,
            "video_count": self.video_count,
            "learning_rate": self.learning_rate,
        }


@dataclass
class LoadedCorpus:
    train: list
    val: list
    anchors: object
    attribute_map: object


def load_corpus(index: CorpusIndex, dtype=np.float64) -> LoadedCorpus:
    return LoadedCorpus(
        train=load_split(index, "train", dtype=dtype),
        val=load_split(index, "val", dtype=dtype),
        anchors=index.anchors,
        attribute_map=index.attribute_map,
    )


def _video_losses(batch, state: ModelState, anchors, config: TrainConfig, mode: str,
                  epoch: int):
    breakdowns = []
    for i, video_id in enumerate(batch.video_ids):
        selected = select_anchor_prompt(anchors, mode, config.seed, epoch, video_id) \
            if state.config.ablation != "linear" else None
        result = forward(batch.features[i], selected, state, mode, mask=batch.masks[i])
        breakdowns.append(total_loss(
            result, batch.labels[i], selected, batch.masks[i],
            attribute_weight=state.config.attribute_weight,
            normalize_anchors=state.config.normalize_anchors,
        ))
    return breakdowns


def run_epoch(state: ModelState, corpus: LoadedCorpus, config: TrainConfig,
              mode: str) -> EpochReport:
    """One pass over a split: optimize on train batches, measure on others."""
    if mode not in ("train", "val"):
        raise ValueError(f"unknown epoch mode {mode!r}")
    videos = corpus.train if mode == "train" else corpus.val
    if not videos:
        raise ValueError(f"empty {mode} split")
    train = mode == "train"
    epoch = state.epoch
    batches = make_batches(videos, config.batch_size,
                           max_frames=config.max_frames if train else None,
                           train=train, seed=config.seed, epoch=epoch)
    active = state.active_params()
    started = time.perf_counter()
    totals, actions, attributes, count = 0.0, 0.0, 0.0, 0

    for batch in batches:
        if train:
            breakdowns = _video_losses(batch, state, corpus.anchors, config, "train", epoch)
            batch_loss = breakdowns[0].total
            for b in breakdowns[1:]:
                batch_loss = batch_loss + b.total
            batch_loss = batch_loss * (1.0 / len(breakdowns))
            if not np.isfinite(batch_loss.data):
                raise NonFiniteLossError(
                    f"non-finite loss {batch_loss.data} in epoch {epoch} on videos {batch.video_ids}"
                )
            zero_grads(active)
            batch_loss.backward()
            if config.grad_clip:
                clip_global_norm(active, config.grad_clip)
            adam_step(active, state.adam)
        else:
            with tn.no_grad():
                breakdowns = _video_losses(batch, state, corpus.anchors, config, "eval", epoch)
        for b in breakdowns:
            totals += b.total.item()
            actions += b.action
            attributes += b.attribute
            count += 1

    return EpochReport(
        epoch=epoch, mode=mode,
        mean_total=totals / count, mean_action=actions / count,
        mean_attribute=attributes / count, video_count=count,
        learning_rate=state.adam.learning_rate,
        duration_s=time.perf_counter() - started,
    )


# ---------------------------------------------------------------------------
# evaluation to score matrices
# ---------------------------------------------------------------------------

def predict_scores(state: ModelState, features: np.ndarray,
                   mask: np.ndarray | None = None) -> np.ndarray:
    """Per-frame sigmoid class scores [T, C] for one video (eval mode)."""
    with tn.no_grad():
        result = forward(features, None, state, "eval", mask=mask)
        return result.logits.sigmoid().data


def evaluate(state: ModelState, videos: list, jobs: int = 1) -> EvalRun:
    """Score a list of LoadedVideo into an EvalRun; read-only on the state."""
    def one(video):
        return VideoEval(
            video_id=video.video_id,
            scores=predict_scores(state, video.features, video.mask),
            labels=video.labels,
            mask=video.mask,
        )

    # the outer no_grad keeps the graph switch off for the whole pool; the
    # nested switch inside predict_scores is then a no-op in every thread
    with tn.no_grad():
        if jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                results = list(pool.map(one, videos))
        else:
            results = [one(v) for v in videos]
    return EvalRun(results)


def validation_map(state: ModelState, videos: list) -> float | None:
    from .metrics import per_frame_map

    return per_frame_map(evaluate(state, videos)).mean_ap


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _tensor_entries(state: ModelState) -> list:
    """(name, kind, array) for everything a checkpoint must carry."""
    entries = [(name, "param", p.data) for name, p in state.params.items()]
    entries += [(name, "buffer", arr) for name, arr in state.buffers.items()]
    entries += [
        ("prior.probabilities", "prior", state.prior.probabilities),
        ("prior.counts", "prior", state.prior.counts),
        ("prior.totals", "prior", state.prior.totals),
    ]
    entries += [(name, "adam.m", arr) for name, arr in state.adam.first_moment.items()]
    entries += [(name, "adam.v", arr) for name, arr in state.adam.second_moment.items()]
    return entries


def save_checkpoint(state: ModelState, path) -> None:
    """Versioned binary container: JSON header plus raw tensor payloads."""
    entries = _tensor_entries(state)
    header = {
        "model_config": asdict(state.config),
        "epoch": state.epoch,
        "adam": {
            "learning_rate": state.adam.learning_rate,
            "beta1": state.adam.beta1, "beta2": state.adam.beta2,
            "epsilon": state.adam.epsilon, "step_count": state.adam.step_count,
        },
        "scheduler": {
            "best_value": state.scheduler.best_value,
            "num_bad_epochs": state.scheduler.num_bad_epochs,
        },
        "tensors": [
            {"name": name, "kind": kind, "shape": list(arr.shape), "dtype": str(arr.dtype)}
            for name, kind, arr in entries
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<HQ", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for _, _, arr in entries:
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_checkpoint(path) -> ModelState:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
        version, blob_len = struct.unpack("<HQ", fh.read(10))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(blob_len).decode("utf-8"))
        payload = fh.read()

    config = config_from_dict(header["model_config"])
    arrays, offset = {}, 0
    for meta in header["tensors"]:
        shape = tuple(meta["shape"])
        dtype = np.dtype(meta["dtype"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if shape else dtype.itemsize
        raw = payload[offset:offset + nbytes]
        if len(raw) != nbytes:
            raise CheckpointError(f"{path}: truncated payload at tensor {meta['name']!r}")
        arrays[(meta["kind"], meta["name"])] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
        offset += nbytes
    if offset != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - offset} trailing bytes")

    # rebuild a skeleton with the right shapes, then validate and fill
    skeleton = init_model_state(
        config,
        CoOccurrencePrior(
            probabilities=arrays[("prior", "prior.probabilities")],
            counts=arrays[("prior", "prior.counts")],
            totals=arrays[("prior", "prior.totals")],
        ),
        seed=0,
        learning_rate=header["adam"]["learning_rate"],
    )
    mismatches = []
    for name, p in skeleton.params.items():
        stored = arrays.get(("param", name))
        if stored is None or stored.shape != p.data.shape:
            mismatches.append(f"{name}: expected {p.data.shape}, "
                              f"got {None if stored is None else stored.shape}")
        else:
            p.data = stored
    for name in skeleton.buffers:
        stored = arrays.get(("buffer", name))
        if stored is None or stored.shape != skeleton.buffers[name].shape:
            mismatches.append(f"{name}: buffer missing or misshaped")
        else:
            skeleton.buffers[name] = stored
    if mismatches:
        raise CheckpointError(f"{path}: incompatible tensors: " + "; ".join(mismatches))

    adam = skeleton.adam
    adam.beta1 = header["adam"]["beta1"]
    adam.beta2 = header["adam"]["beta2"]
    adam.epsilon = header["adam"]["epsilon"]
    adam.step_count = header["adam"]["step_count"]
    for name in list(adam.first_moment):
        m = arrays.get(("adam.m", name))
        v = arrays.get(("adam.v", name))
        if m is not None:
            adam.first_moment[name] = m
        if v is not None:
            adam.second_moment[name] = v
    skeleton.scheduler = SchedulerState(
        best_value=header["scheduler"]["best_value"],
        num_bad_epochs=header["scheduler"]["num_bad_epochs"],
    )
    skeleton.epoch = header["epoch"]
    return skeleton


def state_hash(state: ModelState) -> str:
    """Digest of all parameters and buffers (used to prove non-mutation)."""
    digest = hashlib.blake2b(digest_size=16)
    for name in sorted(state.params):
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(state.params[name].data).tobytes())
    for name in sorted(state.buffers):
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(state.buffers[name]).tobytes())
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# full training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    state: ModelState
    history: list                 # of dict epoch records
    best_val_loss: float
    best_val_map: float | None
    best_epoch: int


def train(index_or_corpus, config: TrainConfig, out_dir=None,
          state: ModelState | None = None, quiet: bool = True) -> TrainResult:
    """Train to max_epochs, tracking validation loss/mAP every epoch.

    Pass a previously loaded ModelState to resume: epochs continue from
    state.epoch with identical batch order, crops and prompt draws as the
    uninterrupted run.
    """
    config.validate()
    corpus = index_or_corpus
    if isinstance(index_or_corpus, CorpusIndex):
        dtype = np.float64 if config.dtype == "float64" else np.float32
        corpus = load_corpus(index_or_corpus, dtype=dtype)
    if not corpus.train:
        raise ValueError("empty train split")
    if not corpus.val:
        raise ValueError("empty val split")

    dims = corpus.train[0]
    if state is None:
        model_config = config.model_config(
            input_dim=dims.features.shape[1],
            n_attributes=corpus.anchors.attribute_count,
            n_classes=dims.labels.shape[1],
        )
        prior = build_prior(
            _train_label_sets(corpus),
            corpus.attribute_map, corpus.anchors.attribute_count,
            frame_counts=[v.features.shape[0] for v in corpus.train],
        )
        state = init_model_state(model_config, prior, seed=config.seed,
                                 learning_rate=config.learning_rate)

    scheduler = PlateauScheduler(state.adam, state.scheduler,
                                 factor=config.plateau_factor,
                                 patience=config.plateau_patience)

    out = Path(out_dir) if out_dir is not None else None
    log_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "train_log.jsonl"

    history = []
    best_val_loss = state.scheduler.best_value
    best_val_map = None
    best_epoch = -1

    for epoch in range(state.epoch, config.max_epochs):
        train_report = run_epoch(state, corpus, config, "train")
        val_report = run_epoch(state, corpus, config, "val")
        val_map = validation_map(state, corpus.val)
        new_lr = scheduler.step(val_report.mean_total)
        state.epoch = epoch + 1

        record = {
            "epoch": epoch,
            "train": train_report.log_record(),
            "val": val_report.log_record(),
            "val_map": val_map,
            "learning_rate": new_lr,
        }
        history.append(record)
        if log_path is not None:
            with open(log_path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
        if not quiet:
            print(f"epoch {epoch:4d}  train {train_report.mean_total:.4f}  "
                  f"val {val_report.mean_total:.4f}  mAP {val_map if val_map is None else round(val_map, 4)}  "
                  f"lr {new_lr:g}  ({train_report.duration_s:.1f}s)")

        if val_report.mean_total < best_val_loss:
            best_val_loss = val_report.mean_total
            best_val_map = val_map
            best_epoch = epoch
            if out is not None:
                save_checkpoint(state, out / "best.ckpt")

    if out is not None:
        save_checkpoint(state, out / "final.ckpt")
        if not (out / "best.ckpt").exists():
            # a resumed run may never beat the inherited best; still leave a
            # usable best checkpoint behind
            save_checkpoint(state, out / "best.ckpt")
    return TrainResult(state=state, history=history, best_val_loss=best_val_loss,
                       best_val_map=best_val_map, best_epoch=best_epoch)


def _train_label_sets(corpus: LoadedCorpus):
    """Adapt loaded dense labels back into interval-free label views.

    build_prior only needs densified activity, so wrap each video's dense
    matrix in a minimal object exposing densify()/min_frame_count().
    """
    class _DenseLabels:
        def __init__(self, dense):
            self._dense = dense

        def densify(self, frame_count):
            return self._dense[:frame_count]

        def min_frame_count(self):
            return self._dense.shape[0]

    return [_DenseLabels(v.labels) for v in corpus.train]
