"""The SKNO operator: lifting, global spectral propagators, an optional local
propagator, and recovery.

``forward(model, a)`` evaluates ``Q . (sigma . L)^n . P`` on a batch
``a`` of shape ``(batch, *spatial, d_a)`` and returns ``(batch, *spatial, d_u)``.
Passing ``record=True`` also returns the :class:`~skno.adjoint.Tape` needed by
:func:`skno.adjoint.backward`.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import blocks
from .exceptions import NumericError, UsageError
from .skt import read_skt, write_skt

LIFT_KINDS = ("constant", "linear", "mlp", "mlp_dropout")
RECOVER_KINDS = ("delta", "step", "mean", "linear", "mlp", "mlp_dropout")
FIXED_RECOVER = ("delta", "step", "mean")
DROPOUT_RATE = 0.1


@dataclass(frozen=True)
class ArchConfig:
    """Architecture and ablation switches.

    ``n_layers`` counts the global (spectral) propagators; the local propagator,
    when enabled, is one extra layer appended after them.
    """

    d: int = 1
    n_layers: int = 1
    modes: int = 2
    n_p: int = 4
    lift_kind: str = "linear"
    recover_kind: str = "linear"
    a_tilde_form: str = "diag"
    with_a_tilde: bool = True
    with_bias_b: bool = True
    with_linear_residual: bool = True
    with_nonlinear_residual: bool = True
    with_local_propagator: bool = False
    with_global_propagators: bool = True
    with_positional_features: bool = False
    activation: str = "gelu"
    hidden: int | None = None
    # fixed affine normalisers: a -> (a - in_shift) / in_scale, u = out_scale * Q[v]
    in_shift: float = 0.0
    in_scale: float = 1.0
    out_scale: float = 1.0

    def __post_init__(self):
        if self.d not in (1, 2):
            raise UsageError(f"d must be 1 or 2, got {self.d}")
        if self.n_layers < 0 or (self.n_layers == 0 and not self.with_local_propagator):
            raise UsageError("need at least one propagator layer")
        if self.modes < 1:
            raise UsageError("modes must be >= 1")
        if self.n_p < 1:
            raise UsageError("n_p must be >= 1")
        if self.lift_kind not in LIFT_KINDS:
            raise UsageError(f"unknown lift_kind {self.lift_kind!r}; expected one of {LIFT_KINDS}")
        if self.recover_kind not in RECOVER_KINDS:
            raise UsageError(
                f"unknown recover_kind {self.recover_kind!r}; expected one of {RECOVER_KINDS}"
            )
        if self.a_tilde_form not in ("diag", "full"):
            raise UsageError(f"a_tilde_form must be 'diag' or 'full', got {self.a_tilde_form!r}")
        if self.activation not in blocks.ACTIVATIONS:
            raise UsageError(f"unknown activation {self.activation!r}")
        if not (self.in_scale > 0 and self.out_scale > 0 and np.isfinite(self.in_shift)):
            raise UsageError("normaliser scales must be positive and finite")
        if not (self.with_global_propagators and self.n_layers > 0) and not self.with_local_propagator:
            raise UsageError("at least one of the global or local propagators must be enabled")

    @property
    def n_total_layers(self) -> int:
        return self.n_layers + int(self.with_local_propagator)

    @property
    def hidden_width(self) -> int:
        return self.hidden or self.n_p

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ArchConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise UsageError(f"unknown architecture keys: {sorted(unknown)}")
        return cls(**data)

    def replace(self, **changes) -> "ArchConfig":
        return ArchConfig.from_dict({**self.to_dict(), **changes})

    def summary(self) -> str:
        flags = [k for k, v in self.to_dict().items() if k.startswith("with_") and not v]
        local = "+1" if self.with_local_propagator else ""
        text = (f"d={self.d} L={self.n_layers}{local} k={self.modes} np={self.n_p} "
                f"P={self.lift_kind} Q={self.recover_kind} A={self.a_tilde_form} "
                f"act={self.activation}")
        if flags:
            text += " off=" + ",".join(f[5:] for f in flags)
        return text


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj)).hexdigest()


class SknoModel:
    """Parameters of one operator instance.

    ``params`` maps names to float64 arrays; complex spectral weights are
    stored as separate ``*.a_re`` / ``*.a_im`` arrays.
    """

    def __init__(self, arch: ArchConfig, in_channels: int = 1, out_channels: int = 1,
                 seed: int = 0, params: dict | None = None):
        self.arch = arch
        self.in_channels = int(in_channels)
        self.out_channels = int(out_channels)
        self.seed = int(seed)
        if arch.recover_kind in FIXED_RECOVER and self.out_channels != 1:
            raise UsageError(f"recover_kind {arch.recover_kind!r} needs a single output channel")
        self.params = params if params is not None else self._init_params(np.random.default_rng(seed))
        self.dropout_rng = np.random.default_rng([self.seed, 1])

    # -- structure ------------------------------------------------------------

    @property
    def lift_channels(self) -> int:
        return self.in_channels + (self.arch.d if self.arch.with_positional_features else 0)

    def global_prefixes(self):
        return [f"layer{l}." for l in range(self.arch.n_layers)]

    def layer_prefixes(self):
        out = self.global_prefixes()
        if self.arch.with_local_propagator:
            out.append("local.")
        return out

    def fixed_chi(self) -> np.ndarray:
        n = self.arch.n_p
        kind = self.arch.recover_kind
        chi = np.zeros(n)
        if kind == "delta":
            chi[n // 2] = 1.0
        elif kind == "step":
            chi[n // 2:] = 1.0 / (n - n // 2)
        elif kind == "mean":
            chi[:] = 1.0 / n
        else:
            raise UsageError(f"{kind!r} recovery has learnable weights")
        return chi[:, None]

    def constant_lift(self) -> np.ndarray:
        return np.full((self.lift_channels, self.arch.n_p), 1.0 / self.lift_channels)

    # -- initialisation -------------------------------------------------------

    def _mlp(self, rng, p, prefix, n_in, n_hidden, n_out):
        p[prefix + "w1"] = rng.standard_normal((n_in, n_hidden)) / np.sqrt(n_in)
        p[prefix + "b1"] = np.zeros(n_hidden)
        p[prefix + "w2"] = rng.standard_normal((n_hidden, n_out)) / np.sqrt(n_hidden)
        p[prefix + "b2"] = np.zeros(n_out)

    def _init_params(self, rng) -> dict:
        arch = self.arch
        n_p, hid = arch.n_p, arch.hidden_width
        p: dict[str, np.ndarray] = {}
        c_in = self.lift_channels
        if arch.lift_kind == "linear":
            p["lift.w"] = rng.standard_normal((c_in, n_p)) / np.sqrt(c_in)
        elif arch.lift_kind in ("mlp", "mlp_dropout"):
            self._mlp(rng, p, "lift.", c_in, hid, n_p)
        mshape = blocks.mode_block_shape(arch.d, arch.modes)
        # with a linear skip the layer already passes v through, so the global
        # path starts near zero; otherwise it starts near the identity
        base_gain = 0.0 if arch.with_linear_residual else 1.0
        for prefix in self.global_prefixes():
            if arch.with_global_propagators and arch.with_a_tilde:
                if arch.a_tilde_form == "diag":
                    shape = mshape + (n_p,)
                    base = np.ones(shape)
                else:
                    shape = mshape + (n_p, n_p)
                    base = np.broadcast_to(np.eye(n_p), shape).copy()
                p[prefix + "a_re"] = base_gain * base + 0.02 * rng.standard_normal(shape)
                p[prefix + "a_im"] = 0.02 * rng.standard_normal(shape)
            if arch.with_global_propagators and arch.with_bias_b:
                p[prefix + "b"] = base_gain * np.eye(n_p) + 0.02 * rng.standard_normal((n_p, n_p))
            self._init_pointwise(rng, p, prefix)
        if arch.with_local_propagator:
            stencil = np.zeros((arch.d, n_p, 3))
            stencil[..., 0], stencil[..., 2] = -0.5, 0.5
            p["local.stencil"] = stencil
            p["local.mix"] = 0.1 * rng.standard_normal((n_p, n_p)) / np.sqrt(n_p)
            self._init_pointwise(rng, p, "local.")
        if arch.recover_kind == "linear":
            p["recover.chi"] = rng.standard_normal((n_p, self.out_channels)) / np.sqrt(n_p)
        elif arch.recover_kind in ("mlp", "mlp_dropout"):
            self._mlp(rng, p, "recover.", n_p, hid, self.out_channels)
        return p

    def _init_pointwise(self, rng, p, prefix):
        n_p = self.arch.n_p
        if self.arch.with_linear_residual:
            self._mlp(rng, p, prefix + "res.", n_p, n_p, n_p)
        if self.arch.with_nonlinear_residual:
            self._mlp(rng, p, prefix + "mlp.", n_p, n_p, n_p)

    # -- bookkeeping ----------------------------------------------------------

    @property
    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def copy(self) -> "SknoModel":
        m = SknoModel(self.arch, self.in_channels, self.out_channels, self.seed,
                      params={k: v.copy() for k, v in self.params.items()})
        m.dropout_rng = np.random.default_rng([self.seed, 1])
        m.dropout_rng.bit_generator.state = self.dropout_rng.bit_generator.state
        return m

    def header(self) -> dict:
        return dict(arch=self.arch.to_dict(), in_channels=self.in_channels,
                    out_channels=self.out_channels, seed=self.seed)

    def arch_hash(self) -> str:
        return config_hash(self.header())

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name, arr in self.params.items():
            write_skt(directory / f"{name}.skt", arr)
        head = self.header()
        head["arch_hash"] = self.arch_hash()
        head["param_names"] = list(self.params)
        (directory / "arch.json").write_text(json.dumps(head, indent=2, sort_keys=True))
        return directory

    @classmethod
    def load(cls, directory, expected_hash: str | None = None) -> "SknoModel":
        directory = Path(directory)
        head = json.loads((directory / "arch.json").read_text())
        arch = ArchConfig.from_dict(head["arch"])
        model = cls(arch, head["in_channels"], head["out_channels"], head.get("seed", 0))
        if model.arch_hash() != head.get("arch_hash"):
            raise UsageError(f"{directory}: arch hash mismatch; checkpoint is inconsistent")
        if expected_hash is not None and expected_hash != model.arch_hash():
            raise UsageError(f"{directory}: checkpoint architecture does not match the request")
        params = {}
        for name in head["param_names"]:
            arr = read_skt(directory / f"{name}.skt")
            if name not in model.params or arr.shape != model.params[name].shape:
                raise UsageError(f"{directory}: parameter {name} does not match architecture")
            params[name] = arr
        if set(params) != set(model.params):
            raise UsageError(f"{directory}: parameter set does not match architecture")
        model.params = params
        return model


# --- forward ---------------------------------------------------------------

def positional_features(shape) -> np.ndarray:
    """Normalised node coordinates ``i / n`` for each spatial axis, shape ``(*shape, d)``."""
    axes = [np.arange(n) / n for n in shape]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack(mesh, axis=-1)


def _check_finite(x, where):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {where}")


def check_input(model: SknoModel, a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    d = model.arch.d
    if a.ndim != d + 2:
        raise UsageError(f"expected input of shape (batch, {'x, ' * d}channels), got {a.shape}")
    if a.shape[-1] != model.in_channels:
        raise UsageError(f"input has {a.shape[-1]} channels, model expects {model.in_channels}")
    need = 2 * model.arch.modes
    if model.arch.n_layers and model.arch.with_global_propagators and model.arch.with_a_tilde:
        small = [n for n in a.shape[1:-1] if n < need]
        if small:
            raise UsageError(
                f"resolution {a.shape[1:-1]} too small for {model.arch.modes} modes; "
                f"need at least {need} points per axis"
            )
    if model.arch.with_local_propagator and min(a.shape[1:-1]) < 3:
        raise UsageError("local propagator needs at least 3 points per axis")
    _check_finite(a, "input")
    return a


def _dropout_mask(model, shape, masks, key, training):
    if not training:
        return None
    if masks is not None and key in masks:
        return masks[key]
    keep = model.dropout_rng.random(shape) >= DROPOUT_RATE
    return keep / (1.0 - DROPOUT_RATE)


def forward(model: SknoModel, a, training: bool = False, record: bool = False,
            masks: dict | None = None, trace: list | None = None):
    """Evaluate the operator on a batch.

    ``masks`` replays dropout masks from an earlier tape; ``trace`` (a list)
    collects ``(label, v)`` snapshots at every ``v_l`` and every pre-activation.
    """
    from .adjoint import Tape

    arch, p = model.arch, model.params
    a = check_input(model, a)
    tape = Tape(a=a, training=training)
    spatial = a.shape[1:-1]

    x = a if (arch.in_shift == 0.0 and arch.in_scale == 1.0) else (a - arch.in_shift) / arch.in_scale
    if arch.with_positional_features:
        pos = np.broadcast_to(positional_features(spatial), a.shape[:-1] + (arch.d,))
        x = np.concatenate([x, pos], axis=-1)

    # MLPs share the tanh form when the layers use it; otherwise exact GELU
    mlp_act = "gelu_tanh" if arch.activation == "gelu_tanh" else "gelu"

    # lifting
    if arch.lift_kind == "linear":
        v = x @ p["lift.w"]
        tape.push("lift", x)
    elif arch.lift_kind == "constant":
        v = x @ model.constant_lift()
        tape.push("lift", x)
    else:
        shape = x.shape[:-1] + (arch.hidden_width,)
        mask = _dropout_mask(model, shape, masks, "lift", training and arch.lift_kind == "mlp_dropout")
        v, cache = blocks.mlp_forward(x, p, "lift.", mlp_act, dropout_mask=mask)
        tape.push("lift", cache)
        if mask is not None:
            tape.masks["lift"] = mask
    _check_finite(v, "lift")
    if trace is not None:
        trace.append(("0", v))

    act, _ = blocks.ACTIVATIONS[arch.activation]
    for l, prefix in enumerate(model.layer_prefixes()):
        is_local = prefix == "local."
        h = np.zeros_like(v)
        layer_cache = {"v": v}
        if is_local:
            y, cache = blocks.local_forward(v, p["local.stencil"], p["local.mix"])
            h = h + y
            layer_cache["local"] = cache
        elif arch.with_global_propagators:
            if arch.with_a_tilde:
                y, cache = blocks.spectral_forward(v, p[prefix + "a_re"], p[prefix + "a_im"],
                                                   arch.modes, arch.a_tilde_form == "full")
                h = h + y
                layer_cache["spectral"] = cache
            if arch.with_bias_b:
                h = h + v @ p[prefix + "b"]
        if arch.with_linear_residual:
            y, cache = blocks.mlp_forward(v, p, prefix + "res.", mlp_act)
            h = h + v + y
            layer_cache["res"] = cache
        _check_finite(h, f"layer {l} ({prefix[:-1]})")
        if trace is not None:
            trace.append((f"{l}{l + 1}", h))
        g, aux = act(h)
        layer_cache["h"] = h
        layer_cache["act_aux"] = aux
        if arch.with_nonlinear_residual:
            y, cache = blocks.mlp_forward(g, p, prefix + "mlp.", mlp_act)
            v = g + y
            layer_cache["mlp"] = cache
        else:
            v = g
        _check_finite(v, f"layer {l} ({prefix[:-1]}) activation")
        tape.push(prefix[:-1], layer_cache)
        if trace is not None:
            trace.append((f"{l + 1}", v))

    # recovery
    kind = arch.recover_kind
    if kind in FIXED_RECOVER:
        u = v @ model.fixed_chi()
        tape.push("recover", v)
    elif kind == "linear":
        u = v @ p["recover.chi"]
        tape.push("recover", v)
    else:
        shape = v.shape[:-1] + (arch.hidden_width,)
        mask = _dropout_mask(model, shape, masks, "recover", training and kind == "mlp_dropout")
        u, cache = blocks.mlp_forward(v, p, "recover.", mlp_act, dropout_mask=mask)
        tape.push("recover", cache)
        if mask is not None:
            tape.masks["recover"] = mask
    if arch.out_scale != 1.0:
        u = u * arch.out_scale
    _check_finite(u, "recovery")
    tape.output = u
    return (u, tape) if record else u
