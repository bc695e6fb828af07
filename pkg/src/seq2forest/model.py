"""Assembly of encoder, forest decoder, and fragment detector into one
trainable model with a shared parameter store."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .corpus import AnnotatedSentence, Entity, EntityForest, flatten_forest
from .decoder import DecodeConfig, DecoderConfig, ForestDecoder
from .detector import BiaffineDetector, DetectorConfig
from .encoder import Encoder, EncoderConfig, encoder_preset
from .layers import ParamStore


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)


def model_preset(name: str) -> ModelConfig:
    if name == "desk":
        return ModelConfig()
    if name == "paper":
        return ModelConfig(
            encoder=encoder_preset("paper"),
            detector=DetectorConfig(mlp_hidden=128, biaffine_dim=128),
            decoder=DecoderConfig(type_dim=32, attention_dim=128),
        )
    raise ValueError(f"unknown model preset {name!r}")


class Seq2ForestModel:
    """One model instance per entity-type inventory.

    Type labels are fixed at construction; their order defines the
    detector's channel layout, so it is part of the checkpoint.
    """

    def __init__(
        self,
        type_labels: Sequence[str],
        config: ModelConfig | None = None,
        seed: int = 0,
        dtype=np.float32,
    ):
        if not type_labels:
            raise ValueError("need at least one entity type")
        if len(set(type_labels)) != len(type_labels):
            raise ValueError("type labels must be unique")
        self.type_labels = list(type_labels)
        self.type_index = {label: i for i, label in enumerate(self.type_labels)}
        self.config = config or ModelConfig()
        self.seed = seed
        self.store = ParamStore(np.random.default_rng(seed), dtype=dtype)
        self.encoder = Encoder(self.store, self.config.encoder)
        self.detector = BiaffineDetector(
            self.store,
            self.config.detector,
            num_types=len(self.type_labels),
            input_dim=self.config.encoder.reduced_dim,
        )
        self.decoder = ForestDecoder(
            self.store,
            self.config.decoder,
            state_dim=self.config.encoder.reduced_dim,
            encoder_hidden=self.config.encoder.hidden_dim,
            num_types=len(self.type_labels),
        )

    @property
    def num_types(self) -> int:
        return len(self.type_labels)

    def decode_sentence(
        self,
        tokens: Sequence[str],
        decode_config: DecodeConfig,
        precomputed: np.ndarray | None = None,
    ) -> EntityForest:
        encoded = self.encoder.encode(tokens, precomputed=precomputed)
        return self.decoder.decode_forest(
            encoded, self.detector, decode_config, self.type_labels
        )

    def predict_entities(
        self,
        tokens: Sequence[str],
        decode_config: DecodeConfig,
        precomputed: np.ndarray | None = None,
    ) -> frozenset[Entity]:
        return flatten_forest(self.decode_sentence(tokens, decode_config, precomputed))

    def predict_corpus(
        self,
        corpus: Sequence[AnnotatedSentence],
        decode_config: DecodeConfig,
        precomputed: Sequence[np.ndarray] | None = None,
    ) -> list[frozenset[Entity]]:
        out = []
        for index, sentence in enumerate(corpus):
            vectors = precomputed[index] if precomputed is not None else None
            out.append(self.predict_entities(sentence.tokens, decode_config, vectors))
        return out
