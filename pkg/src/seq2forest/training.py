"""Teacher-forced training of the full model.

Supervision is organized as step instances: the depth-1 instance of a
sentence scores all first fragments across every type channel, and each
gold forest node at depth 1 or 2 spawns a next-depth instance whose
gold cells are that node's children on the parent-type channel.  Nodes
without children yield empty-gold instances, which is how the decoder
learns to stop.  The contiguous-only mode trains (and decodes) depth 1
alone.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field, asdict
from typing import IO, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import AnnotatedSentence, Fragment, build_forest, type_inventory
from .decoder import DecodeConfig, DecoderConfig
from .detector import DetectorConfig, GoldGrid, span_loss, upper_triangle_mask
from .encoder import EncoderConfig
from .evaluation import prf
from .layers import ParamStore
from .model import ModelConfig, Seq2ForestModel, model_preset

log = logging.getLogger(__name__)

MODES = ("nested", "discontinuous")

MAX_SUPERVISED_FRAGMENTS = 3


class TrainingAbort(Exception):
    """Training stopped because a batch produced a non-finite loss."""


class CheckpointError(Exception):
    """A checkpoint file is unreadable, corrupt, or of an unknown version."""


@dataclass(frozen=True)
class TrainConfig:
    """Desk-scale defaults (from-scratch training); see train_preset."""

    mode: str = "discontinuous"
    learning_rate: float = 1e-3
    batch_size: int = 20
    max_epochs: int = 80
    seed: int = 0
    weight_decay: float = 0.0
    grad_clip: float = 5.0
    threshold: float = 0.5
    max_children: int = 8
    model: ModelConfig = field(default_factory=ModelConfig)
    dtype: str = "float32"

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")

    @property
    def max_depth(self) -> int:
        return 1 if self.mode == "nested" else 3

    def decode_config(self) -> DecodeConfig:
        return DecodeConfig(
            max_depth=self.max_depth,
            threshold=self.threshold,
            max_children=self.max_children,
        )


def train_preset(name: str) -> TrainConfig:
    if name == "desk":
        return TrainConfig()
    if name == "paper":
        return TrainConfig(
            learning_rate=1e-5,
            batch_size=20,
            max_epochs=80,
            weight_decay=0.01,
            model=model_preset("paper"),
        )
    raise ValueError(f"unknown train preset {name!r}")


@dataclass
class StepInstance:
    """One grid supervision target at one decoding depth."""

    sentence_index: int
    depth: int
    parent_chain: tuple[Fragment, ...]
    parent_type: int | None
    gold: GoldGrid

    def __post_init__(self) -> None:
        if self.depth == 1 and (self.parent_chain or self.parent_type is not None):
            raise ValueError("depth-1 instances cannot have a parent chain")
        if self.depth > 1 and (
            len(self.parent_chain) != self.depth - 1 or self.parent_type is None
        ):
            raise ValueError("parent chain length must be depth - 1")


def supervisable_entities(sentence: AnnotatedSentence):
    """Split entities into (trainable, dropped-for-depth) sets."""
    keep = [
        e for e in sentence.entities if len(e.fragments) <= MAX_SUPERVISED_FRAGMENTS
    ]
    dropped = len(sentence.entities) - len(keep)
    return keep, dropped


def teacher_forcing_expand(
    sentence: AnnotatedSentence,
    sentence_index: int,
    type_index: dict[str, int],
    num_types: int,
    mode: str = "discontinuous",
) -> list[StepInstance]:
    """Build the step instances for one sentence from its gold forest.

    Entities with too many fragments must already be filtered out (see
    supervisable_entities).
    """
    n = len(sentence.tokens)
    entities, _ = supervisable_entities(sentence)
    forest = build_forest(entities)

    first_gold = np.zeros((n, num_types, n), dtype=np.float64)
    for type_id, roots in forest.trees.items():
        channel = type_index[type_id]
        for fragment in roots:
            first_gold[fragment.start, channel, fragment.end] = 1.0
    instances = [
        StepInstance(
            sentence_index=sentence_index,
            depth=1,
            parent_chain=(),
            parent_type=None,
            gold=GoldGrid(first_gold, upper_triangle_mask(n, num_types)),
        )
    ]
    if mode == "nested":
        return instances

    for type_id, chain, node in forest.walk():
        depth = len(chain)
        if depth >= MAX_SUPERVISED_FRAGMENTS:
            continue
        channel = type_index[type_id]
        parent = chain[-1]
        gold = np.zeros((n, num_types, n), dtype=np.float64)
        for child in node.children:
            gold[child.start, channel, child.end] = 1.0
        mask = upper_triangle_mask(n, num_types, min_start=parent.end + 1)
        instances.append(
            StepInstance(
                sentence_index=sentence_index,
                depth=depth + 1,
                parent_chain=chain,
                parent_type=channel,
                gold=GoldGrid(gold, mask),
            )
        )
    return instances


def expand_corpus(
    corpus: Sequence[AnnotatedSentence],
    type_index: dict[str, int],
    num_types: int,
    mode: str,
) -> tuple[list[StepInstance], int]:
    """All step instances for a corpus, plus the dropped-entity count."""
    instances: list[StepInstance] = []
    dropped_total = 0
    for index, sentence in enumerate(corpus):
        _, dropped = supervisable_entities(sentence)
        dropped_total += dropped
        instances.extend(
            teacher_forcing_expand(sentence, index, type_index, num_types, mode)
        )
    if dropped_total:
        log.warning(
            "excluded %d entities with more than %d fragments from supervision",
            dropped_total,
            MAX_SUPERVISED_FRAGMENTS,
        )
    return instances, dropped_total


def _sentence_loss(
    model: Seq2ForestModel,
    sentence: AnnotatedSentence,
    instances: Sequence[StepInstance],
    max_depth: int,
    precomputed: np.ndarray | None = None,
) -> Tensor:
    """Sum of span losses for one sentence's instances.

    Decoder states are memoized per (type, parent chain), so instances
    that share a teacher-forced prefix share the computation, exactly as
    paths share prefixes at decode time.
    """
    encoded = model.encoder.encode(sentence.tokens, precomputed=precomputed)
    initial = model.decoder.init_state(encoded)
    depth1 = model.decoder.advance(initial, initial.next_input, max_depth)
    states: dict[tuple[int | None, tuple[Fragment, ...]], object] = {
        (None, ()): depth1
    }

    def state_for(parent_type: int | None, chain: tuple[Fragment, ...]):
        key = (parent_type if chain else None, chain)
        if key in states:
            return states[key]
        parent_state = state_for(parent_type, chain[:-1])
        x = model.decoder.fragment_embedding(
            chain[-1], parent_type, parent_state.scratchpad
        )
        state = model.decoder.advance(parent_state, x, max_depth)
        states[key] = state
        return state

    total: Tensor | None = None
    for inst in sorted(instances, key=lambda i: (i.depth, i.parent_chain)):
        state = state_for(inst.parent_type, inst.parent_chain)
        logits = model.detector.score_logits(state.scratchpad)
        loss = span_loss(logits, inst.gold)
        total = loss if total is None else total + loss
    if total is None:
        total = Tensor(np.zeros((), dtype=model.store.dtype))
    return total


def compute_loss(
    model: Seq2ForestModel,
    corpus: Sequence[AnnotatedSentence],
    instances: Sequence[StepInstance],
    mode: str = "discontinuous",
    precomputed: Sequence[np.ndarray] | None = None,
) -> Tensor:
    """Summed loss of a batch of step instances."""
    max_depth = 1 if mode == "nested" else 3
    if mode == "nested" and any(inst.depth > 1 for inst in instances):
        raise ValueError("nested mode only trains depth-1 instances")
    by_sentence: dict[int, list[StepInstance]] = {}
    for inst in instances:
        by_sentence.setdefault(inst.sentence_index, []).append(inst)
    total: Tensor | None = None
    for index in sorted(by_sentence):
        vectors = precomputed[index] if precomputed is not None else None
        loss = _sentence_loss(
            model, corpus[index], by_sentence[index], max_depth, vectors
        )
        total = loss if total is None else total + loss
    if total is None:
        total = Tensor(np.zeros((), dtype=model.store.dtype))
    return total


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(
        self,
        store: ParamStore,
        learning_rate: float,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.store = store
        self.lr = learning_rate
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.steps = 0
        self.first_moment = {
            name: np.zeros_like(t.data) for name, t in store.params.items()
        }
        self.second_moment = {
            name: np.zeros_like(t.data) for name, t in store.params.items()
        }

    def step(self) -> None:
        self.steps += 1
        b1, b2 = self.betas
        correction1 = 1.0 - b1**self.steps
        correction2 = 1.0 - b2**self.steps
        for name, param in self.store.params.items():
            grad = param.grad
            if grad is None:
                continue
            m = self.first_moment[name]
            v = self.second_moment[name]
            m *= b1
            m += (1.0 - b1) * grad
            v *= b2
            v += (1.0 - b2) * grad * grad
            update = (m / correction1) / (np.sqrt(v / correction2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * param.data
            param.data = param.data - self.lr * update


def clip_gradients(store: ParamStore, max_norm: float) -> float:
    """Scale all gradients so their global norm is at most max_norm."""
    norm = store.global_grad_norm()
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for t in store.params.values():
            if t.grad is not None:
                t.grad *= scale
    return norm


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    version: int
    tensors: dict[str, np.ndarray]
    configs: dict
    metadata: dict


def _encoder_config_from_dict(d: dict) -> EncoderConfig:
    d = dict(d)
    d["char_kernels"] = tuple(d["char_kernels"])
    return EncoderConfig(**d)


def model_config_to_dict(config: ModelConfig) -> dict:
    return asdict(config)


def model_config_from_dict(d: dict) -> ModelConfig:
    return ModelConfig(
        encoder=_encoder_config_from_dict(d["encoder"]),
        detector=DetectorConfig(**d["detector"]),
        decoder=DecoderConfig(**d["decoder"]),
    )


def make_checkpoint(
    model: Seq2ForestModel, train_config: TrainConfig, metadata: dict
) -> Checkpoint:
    configs = {
        "model": model_config_to_dict(model.config),
        "type_labels": model.type_labels,
        "mode": train_config.mode,
        "threshold": train_config.threshold,
        "max_children": train_config.max_children,
        "dtype": train_config.dtype,
    }
    return Checkpoint(
        version=CHECKPOINT_VERSION,
        tensors=model.store.state_dict(),
        configs=configs,
        metadata=metadata,
    )


def save_checkpoint(checkpoint: Checkpoint, path) -> None:
    """Binary container: one-line JSON header, then little-endian float32
    tensor data at the offsets in the header's manifest."""
    manifest = []
    blobs = []
    offset = 0
    for name, array in checkpoint.tensors.items():
        data = np.ascontiguousarray(array, dtype="<f4")
        manifest.append(
            {
                "name": name,
                "shape": list(array.shape),
                "dtype": "float32",
                "offset": offset,
            }
        )
        blobs.append(data.tobytes())
        offset += len(blobs[-1])
    header = {
        "version": checkpoint.version,
        "configs": checkpoint.configs,
        "metadata": checkpoint.metadata,
        "tensors": manifest,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    newline = raw.find(b"\n")
    if newline < 0:
        raise CheckpointError(f"{path}: not a checkpoint (missing header)")
    try:
        header = json.loads(raw[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    if not isinstance(header, dict) or "version" not in header:
        raise CheckpointError(f"{path}: corrupt header")
    if header["version"] != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint version {header['version']!r}"
        )
    data = raw[newline + 1 :]
    tensors: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = entry["offset"] + 4 * count
        if end > len(data):
            raise CheckpointError(f"{path}: truncated tensor data for {entry['name']!r}")
        tensors[entry["name"]] = np.frombuffer(
            data, dtype="<f4", count=count, offset=entry["offset"]
        ).reshape(shape)
    return Checkpoint(
        version=header["version"],
        tensors=tensors,
        configs=header["configs"],
        metadata=header.get("metadata", {}),
    )


def restore_model(checkpoint: Checkpoint) -> tuple[Seq2ForestModel, DecodeConfig]:
    """Rebuild a ready-to-decode model from a checkpoint."""
    configs = checkpoint.configs
    model = Seq2ForestModel(
        configs["type_labels"],
        model_config_from_dict(configs["model"]),
        seed=int(checkpoint.metadata.get("seed", 0)),
        dtype=np.dtype(configs.get("dtype", "float32")),
    )
    model.store.load_state_dict(checkpoint.tensors)
    decode_config = DecodeConfig(
        max_depth=1 if configs.get("mode") == "nested" else 3,
        threshold=float(configs.get("threshold", 0.5)),
        max_children=int(configs.get("max_children", 8)),
    )
    return model, decode_config


# ---------------------------------------------------------------------------
# training loop


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    dev_p: float
    dev_r: float
    dev_f1: float
    seconds: float

    def to_json_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "dev_p": self.dev_p,
            "dev_r": self.dev_r,
            "dev_f1": self.dev_f1,
            "seconds": self.seconds,
        }


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[EpochRecord]
    model: Seq2ForestModel
    best_epoch: int
    best_dev_f1: float


def train(
    train_corpus: Sequence[AnnotatedSentence],
    dev_corpus: Sequence[AnnotatedSentence],
    config: TrainConfig,
    log_stream: IO[str] | None = None,
    train_embeddings: Sequence[np.ndarray] | None = None,
    dev_embeddings: Sequence[np.ndarray] | None = None,
) -> TrainResult:
    """Optimize on the training corpus, keep the best dev-F1 parameters.

    Deterministic for a fixed config: parameter init, epoch shuffling,
    and every update derive from config.seed.  Per-epoch records go to
    log_stream as JSON lines when given.
    """
    if not train_corpus or not dev_corpus:
        raise ValueError("training and dev corpora must be non-empty")
    labels = type_inventory(list(train_corpus) + list(dev_corpus))
    if not labels:
        raise ValueError("corpora contain no entities to learn from")

    model = Seq2ForestModel(
        labels, config.model, seed=config.seed, dtype=np.dtype(config.dtype)
    )
    instances, _ = expand_corpus(
        train_corpus, model.type_index, model.num_types, config.mode
    )
    by_sentence: dict[int, list[StepInstance]] = {}
    for inst in instances:
        by_sentence.setdefault(inst.sentence_index, []).append(inst)

    optimizer = AdamW(
        model.store,
        learning_rate=config.learning_rate,
        weight_decay=config.weight_decay,
    )
    shuffle_rng = np.random.default_rng(config.seed)
    decode_config = config.decode_config()
    golds = [sent.entities for sent in dev_corpus]

    history: list[EpochRecord] = []
    best_f1 = -1.0
    best_epoch = 0
    best_state: dict[str, np.ndarray] | None = None

    for epoch in range(1, config.max_epochs + 1):
        started = time.perf_counter()
        order = shuffle_rng.permutation(len(train_corpus))
        epoch_loss = 0.0
        for batch_index, start in enumerate(range(0, len(order), config.batch_size)):
            batch = order[start : start + config.batch_size]
            model.store.zero_grads()
            batch_loss: Tensor | None = None
            for sentence_index in batch:
                vectors = (
                    train_embeddings[sentence_index]
                    if train_embeddings is not None
                    else None
                )
                loss = _sentence_loss(
                    model,
                    train_corpus[sentence_index],
                    by_sentence.get(int(sentence_index), []),
                    config.max_depth,
                    vectors,
                )
                batch_loss = loss if batch_loss is None else batch_loss + loss
            assert batch_loss is not None
            value = batch_loss.item()
            if not math.isfinite(value):
                raise TrainingAbort(
                    f"non-finite loss {value} in epoch {epoch}, batch {batch_index}"
                )
            ad.backward(batch_loss)
            clip_gradients(model.store, config.grad_clip)
            optimizer.step()
            epoch_loss += value

        preds = model.predict_corpus(dev_corpus, decode_config, dev_embeddings)
        dev_p, dev_r, dev_f1 = prf(preds, golds)
        record = EpochRecord(
            epoch=epoch,
            train_loss=epoch_loss / len(train_corpus),
            dev_p=dev_p,
            dev_r=dev_r,
            dev_f1=dev_f1,
            seconds=time.perf_counter() - started,
        )
        history.append(record)
        if log_stream is not None:
            log_stream.write(json.dumps(record.to_json_dict()) + "\n")
            log_stream.flush()
        log.info(
            "epoch %d: loss %.4f, dev F1 %.4f (%.2fs)",
            epoch,
            record.train_loss,
            dev_f1,
            record.seconds,
        )
        if dev_f1 > best_f1:
            best_f1 = dev_f1
            best_epoch = epoch
            best_state = model.store.state_dict()

    assert best_state is not None
    model.store.load_state_dict(best_state)
    checkpoint = make_checkpoint(
        model,
        config,
        metadata={
            "epoch": best_epoch,
            "dev_f1": best_f1,
            "seed": config.seed,
            "epochs_run": config.max_epochs,
        },
    )
    return TrainResult(
        checkpoint=checkpoint,
        history=history,
        model=model,
        best_epoch=best_epoch,
        best_dev_f1=best_f1,
    )
