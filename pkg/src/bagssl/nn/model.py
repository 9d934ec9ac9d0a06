"""Encoder/projector model: layer spec parsing, shape inference, and the
forward/backward tape."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import Conv2d, Dense, GlobalMeanPool, L2Norm, Layer, Relu, Standardize, TensorBuffer

_PARAMFREE = {"relu": Relu, "standardize": Standardize, "pool": GlobalMeanPool, "l2norm": L2Norm}


@dataclass(frozen=True)
class LayerSpec:
    """One layer in text form, e.g. conv(3,2,8), dense(64), relu."""

    kind: str
    args: tuple[int, ...] = ()

    @classmethod
    def parse(cls, text: str) -> "LayerSpec":
        text = text.strip()
        if "(" in text:
            if not text.endswith(")"):
                raise ValueError(f"malformed layer spec {text!r}")
            kind, rest = text.split("(", 1)
            kind = kind.strip()
            args = tuple(int(a) for a in rest[:-1].split(","))
        else:
            kind, args = text, ()
        if kind == "conv":
            if len(args) != 3 or min(args) < 1:
                raise ValueError(f"conv needs (k,stride,out_channels), got {text!r}")
        elif kind == "dense":
            if len(args) != 1 or args[0] < 1:
                raise ValueError(f"dense needs (out_dim), got {text!r}")
        elif kind in _PARAMFREE:
            if args:
                raise ValueError(f"{kind} takes no arguments, got {text!r}")
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
        return cls(kind, args)

    def format(self) -> str:
        return f"{self.kind}({','.join(str(a) for a in self.args)})" if self.args else self.kind


def parse_layer_specs(text: str) -> list[LayerSpec]:
    """Parse a pipe-separated stack like 'conv(3,2,8)|relu|pool|dense(64)'."""
    specs = [LayerSpec.parse(part) for part in text.split("|") if part.strip()]
    if not specs:
        raise ValueError("empty layer stack")
    return specs


def format_layer_specs(specs: list[LayerSpec]) -> str:
    return "|".join(s.format() for s in specs)


def _build(specs: list[LayerSpec], in_shape: tuple, rng, prefix: str) -> tuple[list[Layer], tuple]:
    layers: list[Layer] = []
    shape = in_shape
    for i, spec in enumerate(specs):
        name = f"{prefix}{i}.{spec.kind}"
        if spec.kind == "conv":
            k, stride, out_ch = spec.args
            if len(shape) != 3:
                raise ValueError(f"{name}: conv needs (C,H,W) input, got {shape}")
            layer = Conv2d(shape[0], out_ch, k, stride, rng, name=name)
        elif spec.kind == "dense":
            layer = Dense(int(np.prod(shape)), spec.args[0], rng, name=name)
        else:
            layer = _PARAMFREE[spec.kind]()
            layer.name = name
        shape = layer.out_shape(shape)
        layers.append(layer)
    return layers, shape


class Tape:
    """Activations saved by one forward pass; consumed exactly once."""

    def __init__(self, batch_size, enc_ctx, proj_ctx, h_shape, z_shape):
        self.batch_size = batch_size
        self.enc_ctx = enc_ctx
        self.proj_ctx = proj_ctx
        self.h_shape = h_shape
        self.z_shape = z_shape
        self.used = False


class Model:
    """Patch encoder f followed by projector g; forward yields both the
    embedding H (encoder output, the representation) and the projection Z
    (what losses consume)."""

    def __init__(self, input_shape: tuple, encoder: str | list, projector: str | list, seed: int):
        self.input_shape = tuple(int(v) for v in input_shape)
        self.encoder_specs = parse_layer_specs(encoder) if isinstance(encoder, str) else list(encoder)
        self.projector_specs = (
            parse_layer_specs(projector) if isinstance(projector, str) else list(projector)
        )
        self.seed = int(seed)
        rng = np.random.default_rng(np.random.SeedSequence(self.seed))
        self.encoder, h_shape = _build(self.encoder_specs, self.input_shape, rng, "enc")
        if len(h_shape) != 1:
            raise ValueError(f"encoder must end with a flat embedding, got shape {h_shape}")
        self.projector, z_shape = _build(self.projector_specs, h_shape, rng, "proj")
        if len(z_shape) != 1:
            raise ValueError(f"projector must end with a flat projection, got shape {z_shape}")
        self.embedding_dim = h_shape[0]
        self.projection_dim = z_shape[0]

    def parameters(self) -> list[TensorBuffer]:
        out = []
        for layer in self.encoder + self.projector:
            out.extend(layer.params())
        return out

    def zero_grads(self):
        for p in self.parameters():
            p.zero_grad()

    def forward(self, x: np.ndarray):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != len(self.input_shape) + 1 or x.shape[1:] != self.input_shape:
            raise ValueError(f"input shape {x.shape[1:]} does not match model {self.input_shape}")
        if x.shape[0] < 1:
            raise ValueError("empty batch")
        enc_ctx = []
        cur = x
        for layer in self.encoder:
            cur, ctx = layer.forward(cur)
            enc_ctx.append(ctx)
        h = cur
        proj_ctx = []
        for layer in self.projector:
            cur, ctx = layer.forward(cur)
            proj_ctx.append(ctx)
        z = cur
        tape = Tape(x.shape[0], enc_ctx, proj_ctx, h.shape, z.shape)
        return h, z, tape

    def backward(self, tape: Tape, dz: np.ndarray, dh: np.ndarray | None = None):
        """Accumulate parameter gradients for dLoss/dZ (plus an optional
        direct dLoss/dH term); returns dLoss/dInput."""
        if tape.used:
            raise ValueError("tape already consumed; rerun forward")
        tape.used = True
        dz = np.asarray(dz, dtype=np.float64)
        if dz.shape != tape.z_shape:
            raise ValueError(f"dZ shape {dz.shape} does not match forward output {tape.z_shape}")
        cur = dz
        for layer, ctx in zip(reversed(self.projector), reversed(tape.proj_ctx)):
            cur = layer.backward(cur, ctx)
        if dh is not None:
            dh = np.asarray(dh, dtype=np.float64)
            if dh.shape != tape.h_shape:
                raise ValueError(f"dH shape {dh.shape} does not match embedding {tape.h_shape}")
            cur = cur + dh
        for layer, ctx in zip(reversed(self.encoder), reversed(tape.enc_ctx)):
            cur = layer.backward(cur, ctx)
        return cur

    def flat_parameters(self) -> np.ndarray:
        params = self.parameters()
        if not params:
            return np.zeros(0)
        return np.concatenate([p.values.ravel() for p in params])

    def set_flat_parameters(self, flat: np.ndarray):
        flat = np.asarray(flat, dtype=np.float64)
        total = sum(p.size for p in self.parameters())
        if flat.size != total:
            raise ValueError(f"parameter count mismatch: {flat.size} != {total}")
        off = 0
        for p in self.parameters():
            p.values[...] = flat[off : off + p.size].reshape(p.shape)
            off += p.size

    def spec_text(self) -> str:
        return (
            f"input {'x'.join(str(v) for v in self.input_shape)}\n"
            f"encoder {format_layer_specs(self.encoder_specs)}\n"
            f"projector {format_layer_specs(self.projector_specs)}\n"
        )

    @classmethod
    def from_spec_text(cls, text: str, seed: int = 0) -> "Model":
        fields = {}
        for line in text.strip().splitlines():
            key, _, value = line.partition(" ")
            fields[key] = value.strip()
        missing = {"input", "encoder", "projector"} - fields.keys()
        if missing:
            raise ValueError(f"model spec text missing fields: {sorted(missing)}")
        input_shape = tuple(int(v) for v in fields["input"].split("x"))
        return cls(input_shape, fields["encoder"], fields["projector"], seed)
