"""Predictor + residual codec bundled as one checkpointable model."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .motion import DEFAULT_SEARCH_RANGE
from .numerics import Module, checkpoint, make_rng
from .predictor import Predictor, PredictorConfig
from .residual_codec import CodecConfig, ResidualCodec


@dataclass
class ModelConfig:
    predictor: PredictorConfig = field(default_factory=PredictorConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    search_range: int = DEFAULT_SEARCH_RANGE

    @classmethod
    def desk(cls, mode: str = "pmcnn") -> "ModelConfig":
        return cls(PredictorConfig.desk(mode), CodecConfig.desk())

    @property
    def mode(self) -> str:
        return self.predictor.mode

    def to_dict(self) -> dict:
        return {"predictor": self.predictor.to_dict(), "codec": self.codec.to_dict(),
                "search_range": self.search_range}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(PredictorConfig(**d["predictor"]), CodecConfig(**d["codec"]), int(d["search_range"]))


class PMVCModel(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.predictor = Predictor(cfg.predictor, make_rng(seed, "predictor"))
        self.codec = ResidualCodec(cfg.codec, make_rng(seed, "codec"))

    @property
    def mode(self) -> str:
        return self.cfg.mode

    def state(self, with_moments: bool = False) -> checkpoint.CheckpointData:
        return checkpoint.state_from_module(self, self.cfg.to_dict(), with_moments)

    def model_hash(self) -> bytes:
        return checkpoint.model_hash(self.state())

    def save(self, path: str | Path, with_moments: bool = False) -> None:
        checkpoint.save(path, self.state(with_moments))

    @classmethod
    def load(cls, path: str | Path) -> "PMVCModel":
        data = checkpoint.load(path)
        return cls.from_state(data)

    @classmethod
    def from_state(cls, data: checkpoint.CheckpointData) -> "PMVCModel":
        if "predictor" not in data.config:
            raise checkpoint.CheckpointError("checkpoint carries no model configuration")
        model = cls(ModelConfig.from_dict(data.config))
        checkpoint.load_into_module(model, data)
        model.eval()
        return model

    def copy_from(self, other: "PMVCModel", part: str) -> None:
        """Copy the weights of one sub-model from ``other``.

        ``part`` is an attribute path such as ``codec`` or ``predictor.frame_path``.
        """

        def resolve(model):
            obj = model
            for attr in part.split("."):
                obj = getattr(obj, attr, None)
                if obj is None:
                    raise ValueError(f"model has no part {part!r}")
            return obj

        src, dst = resolve(other), resolve(self)
        src_p = dict(src.named_parameters())
        for name, p in dst.named_parameters():
            p.data[...] = src_p[name].data
        src_b = dict(src.named_buffers())
        for name, b in dst.named_buffers():
            b[...] = src_b[name]

