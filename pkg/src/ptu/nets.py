"""Backbone networks and the gated transfer assemblies built from them.

A network is declared as a :class:`NetworkSpec`: an input sample shape plus
an ordered tuple of layer descriptors.  Parameters live in flat dicts keyed
``layer{k}.<part>`` where ``k`` is the index among parameterized layers
(pools and flattens carry no parameters and are not counted).  The same dict
format flows through checkpoints, transfer-state application, and training.

A transfer assembly runs a frozen source network and a trainable target
network side by side on the same input and blends their activations through
one gate unit per junction.  Convolutional assemblies place a junction after
every parameterized layer except the output (the blend happens on the value
the next layer consumes, after any interleaved pooling); recurrent
assemblies apply one shared unit at every time step and feed the blended
state back in as the target's recurrent carry.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ParseError, ShapeError
from .tensor import Tape, Tensor
from .unit import PtuOutput, PtuParams, ptu_forward, ptu_init


class TransferState(Enum):
    """Per-layer handling when a target network starts from a source network."""

    RANDOM = "random"
    FINE_TUNE = "fine_tune"
    FROZEN = "frozen"


# ---------------------------------------------------------------------------
# layer descriptors

@dataclass(frozen=True)
class Conv:
    filters: int
    kernel: int
    stride: int = 1
    padding: str = "valid"
    separable: bool = False
    activation: str = "relu"


@dataclass(frozen=True)
class Pool:
    size: int = 2


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Dense:
    width: int
    activation: str = "relu"


@dataclass(frozen=True)
class RnnCell:
    hidden: int


@dataclass(frozen=True)
class Output:
    classes: int


PARAM_LAYERS = (Conv, Dense, RnnCell, Output)


@dataclass(frozen=True)
class NetworkSpec:
    """Input sample shape plus ordered layer descriptors.

    The output layer must be present, unique, and last.  ``input_shape``
    excludes the batch axis: (C, H, W) for image networks, (steps, dims) for
    sequence networks.
    """

    input_shape: tuple[int, ...]
    layers: tuple = ()

    def __post_init__(self):
        outs = [i for i, l in enumerate(self.layers) if isinstance(l, Output)]
        if len(outs) != 1 or outs[0] != len(self.layers) - 1:
            raise ConfigError("spec needs exactly one output layer, in last position")
        if any(d < 1 for d in self.input_shape):
            raise ConfigError(f"input dims must be >= 1, got {self.input_shape}")
        layer_output_shapes(self)  # raises if consecutive shapes do not compose

    @property
    def is_recurrent(self) -> bool:
        return any(isinstance(l, RnnCell) for l in self.layers)

    @property
    def classes(self) -> int:
        return self.layers[-1].classes


def param_layer_indices(spec: NetworkSpec) -> list[int]:
    """Descriptor indices of the parameterized layers, in order."""
    return [i for i, l in enumerate(spec.layers) if isinstance(l, PARAM_LAYERS)]


def layer_count(spec: NetworkSpec) -> int:
    """L: the number of parameterized layers, output included."""
    return len(param_layer_indices(spec))


def layer_output_shapes(spec: NetworkSpec) -> list[tuple[int, ...]]:
    """Per-descriptor sample output shape; rejects sequences that don't compose."""
    if spec.is_recurrent:
        if len(spec.layers) != 2 or not isinstance(spec.layers[0], RnnCell):
            raise ConfigError("recurrent spec must be exactly (cell, output)")
        if len(spec.input_shape) != 2:
            raise ConfigError(f"recurrent input must be (steps, dims), got {spec.input_shape}")
        return [(spec.layers[0].hidden,), (spec.layers[-1].classes,)]

    shape = spec.input_shape
    if len(shape) != 3:
        raise ConfigError(f"image input must be (C, H, W), got {shape}")
    shapes = []
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Conv):
            if len(shape) != 3:
                raise ConfigError(f"layer {i}: conv needs (C, H, W) input, got {shape}")
            ho, wo = T.conv_output_hw(shape[1], shape[2], layer.kernel,
                                      layer.stride, layer.padding)
            shape = (layer.filters, ho, wo)
        elif isinstance(layer, Pool):
            if len(shape) != 3:
                raise ConfigError(f"layer {i}: pool needs (C, H, W) input, got {shape}")
            if shape[1] % layer.size or shape[2] % layer.size:
                raise ConfigError(
                    f"layer {i}: pool {layer.size} does not divide {shape[1]}x{shape[2]}")
            shape = (shape[0], shape[1] // layer.size, shape[2] // layer.size)
        elif isinstance(layer, Flatten):
            shape = (int(np.prod(shape)),)
        elif isinstance(layer, Dense):
            if len(shape) != 1:
                raise ConfigError(f"layer {i}: dense needs flat input, got {shape}")
            shape = (layer.width,)
        elif isinstance(layer, Output):
            if len(shape) != 1:
                raise ConfigError(f"layer {i}: output needs flat input, got {shape}")
            shape = (layer.classes,)
        else:
            raise ConfigError(f"layer {i}: {type(layer).__name__} is not legal here")
        shapes.append(shape)
    return shapes


# ---------------------------------------------------------------------------
# initialization

def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = float(np.sqrt(6.0 / (fan_in + fan_out)))
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


def _init_layer(rng: np.random.Generator, layer, in_shape) -> dict[str, np.ndarray]:
    if isinstance(layer, Conv):
        c = in_shape[0]
        k, n = layer.kernel, layer.filters
        if layer.separable:
            return {"dw": _glorot(rng, (c, k, k), k * k, k * k),
                    "pw": _glorot(rng, (n, c, 1, 1), c, n),
                    "b": np.zeros(n, dtype=np.float32)}
        return {"w": _glorot(rng, (n, c, k, k), c * k * k, n * k * k),
                "b": np.zeros(n, dtype=np.float32)}
    if isinstance(layer, Dense):
        return {"w": _glorot(rng, (in_shape[0], layer.width), in_shape[0], layer.width),
                "b": np.zeros(layer.width, dtype=np.float32)}
    if isinstance(layer, Output):
        return {"w": _glorot(rng, (in_shape[0], layer.classes), in_shape[0], layer.classes),
                "b": np.zeros(layer.classes, dtype=np.float32)}
    if isinstance(layer, RnnCell):
        d, h = in_shape[1], layer.hidden
        return {"wx": _glorot(rng, (d, h), d, h),
                "wh": _glorot(rng, (h, h), h, h),
                "b": np.zeros(h, dtype=np.float32)}
    raise ConfigError(f"{type(layer).__name__} carries no parameters")


def build_params(spec: NetworkSpec, seed: int) -> dict[str, np.ndarray]:
    """Fresh parameters for every parameterized layer, deterministic per seed."""
    rng = np.random.default_rng(seed)
    shapes = layer_output_shapes(spec)
    params: dict[str, np.ndarray] = {}
    k = 0
    for i, layer in enumerate(spec.layers):
        if not isinstance(layer, PARAM_LAYERS):
            continue
        in_shape = spec.input_shape if i == 0 else shapes[i - 1]
        if spec.is_recurrent and isinstance(layer, RnnCell):
            in_shape = spec.input_shape  # (steps, dims); cell consumes dims per step
        for part, arr in _init_layer(rng, layer, in_shape).items():
            params[f"layer{k}.{part}"] = arr
        k += 1
    return params


def build_cnn(spec: NetworkSpec, seed: int) -> dict[str, np.ndarray]:
    """Parameters for an image network; rejects recurrent descriptors."""
    if spec.is_recurrent:
        raise ConfigError("build_cnn: spec contains a recurrent cell")
    return build_params(spec, seed)


def rnn_spec(seq_len: int, input_dim: int, hidden: int, classes: int) -> NetworkSpec:
    return NetworkSpec(input_shape=(seq_len, input_dim),
                       layers=(RnnCell(hidden), Output(classes)))


def build_rnn(hidden: int, input_dim: int, classes: int, seed: int,
              seq_len: int = 28) -> dict[str, np.ndarray]:
    """Parameters for a single-cell tanh recurrent classifier."""
    for name, v in (("hidden", hidden), ("input_dim", input_dim), ("classes", classes)):
        if v < 1:
            raise ConfigError(f"build_rnn: {name} must be >= 1, got {v}")
    return build_params(rnn_spec(seq_len, input_dim, hidden, classes), seed)


def lenet_spec(classes: int, input_hw: int = 28, channels: int = 1) -> NetworkSpec:
    """The LeNet-like image preset: two conv/pool stages, one hidden dense."""
    return NetworkSpec(
        input_shape=(channels, input_hw, input_hw),
        layers=(Conv(32, 5), Pool(2), Conv(64, 5), Pool(2), Flatten(),
                Dense(256), Output(classes)))


def tiny_cnn_spec(classes: int, input_hw: int = 8, channels: int = 1,
                  separable: bool = False) -> NetworkSpec:
    """A desk-scale image preset small enough for exhaustive checks."""
    return NetworkSpec(
        input_shape=(channels, input_hw, input_hw),
        layers=(Conv(4, 3, separable=separable), Pool(2), Flatten(),
                Dense(16), Output(classes)))


def param_count(params: dict[str, np.ndarray]) -> int:
    return sum(a.size for a in params.values())


# ---------------------------------------------------------------------------
# transfer-state application

def _layer_groups(params: dict[str, np.ndarray]) -> list[str]:
    """Ordered layer prefixes ("layer0", "layer1", ...) present in a param dict."""
    ks = {name.split(".", 1)[0] for name in params}
    return sorted(ks, key=lambda s: int(s.removeprefix("layer")))


def apply_transfer_state(target: dict[str, np.ndarray], source: dict[str, np.ndarray],
                         states: Sequence[TransferState],
                         ) -> tuple[dict[str, np.ndarray], frozenset[str]]:
    """Merge a fresh target init with source parameters according to ``states``.

    Random keeps the target's fresh arrays; FineTune copies the source arrays
    and leaves them trainable; Frozen copies them and adds the layer to the
    returned freeze mask.  Copy states require matching shapes.
    """
    groups = _layer_groups(target)
    if len(states) != len(groups):
        raise ConfigError(f"need {len(groups)} states, got {len(states)}")
    out: dict[str, np.ndarray] = {}
    frozen: set[str] = set()
    for grp, state in zip(groups, states):
        names = [n for n in target if n.split(".", 1)[0] == grp]
        for n in names:
            if state is TransferState.RANDOM:
                out[n] = target[n].copy()
                continue
            if n not in source or source[n].shape != target[n].shape:
                have = source.get(n)
                raise ConfigError(
                    f"cannot copy {n} ({state.value}): source has "
                    f"{have.shape if have is not None else 'nothing'}, target {target[n].shape}")
            out[n] = source[n].copy()
            if state is TransferState.FROZEN:
                frozen.add(n)
    return out, frozenset(frozen)


# ---------------------------------------------------------------------------
# models

@dataclass
class PlainModel:
    """A single network: spec, parameters, and the names excluded from updates."""

    spec: NetworkSpec
    params: dict[str, np.ndarray]
    frozen: frozenset[str] = frozenset()


@dataclass
class AssembledModel:
    """Frozen source network + trainable target network + gate units.

    ``ptus`` holds one unit per junction for image assemblies and exactly one
    shared unit for recurrent assemblies.  Source arrays are write-protected.
    """

    topology: NetworkSpec
    source_params: dict[str, np.ndarray]
    target_params: dict[str, np.ndarray]
    ptus: list[PtuParams]
    frozen_target: frozenset[str] = frozenset()

    @property
    def is_recurrent(self) -> bool:
        return self.topology.is_recurrent


@dataclass
class ForwardResult:
    logits: Tensor
    ptu_outputs: list[PtuOutput] = field(default_factory=list)
    tape: Tape | None = None
    env: dict[str, Tensor] = field(default_factory=dict)


def _freeze_arrays(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    out = {}
    for name, arr in params.items():
        arr = arr.copy()
        arr.setflags(write=False)
        out[name] = arr
    return out


def junction_dims(spec: NetworkSpec) -> list[int]:
    """Flattened activation width at each junction (one per non-output layer)."""
    if spec.is_recurrent:
        return [spec.layers[0].hidden]
    shapes = layer_output_shapes(spec)
    pidx = param_layer_indices(spec)
    # junction j sits on the value consumed by parameterized layer j+1, i.e.
    # after the descriptor just before it (pools/flattens included).
    return [int(np.prod(shapes[pidx[j + 1] - 1])) for j in range(len(pidx) - 1)]


def _junction_after(spec: NetworkSpec) -> dict[int, int]:
    """Map descriptor index -> junction ordinal fired after that descriptor."""
    pidx = param_layer_indices(spec)
    return {pidx[j + 1] - 1: j for j in range(len(pidx) - 1)}


def _check_shared_prefix(source: dict[str, np.ndarray], target: dict[str, np.ndarray],
                         spec: NetworkSpec) -> None:
    pidx = param_layer_indices(spec)
    for k in range(len(pidx) - 1):
        names = [n for n in target if n.split(".", 1)[0] == f"layer{k}"]
        for n in names:
            if n not in source or source[n].shape != target[n].shape:
                have = source.get(n)
                raise ConfigError(
                    f"architecture mismatch below the output layer: {n} is "
                    f"{target[n].shape} here, source has "
                    f"{have.shape if have is not None else 'nothing'}")


def _spawn_seeds(seed: int, n: int) -> list[int]:
    rng = np.random.default_rng(seed)
    return [int(s) for s in rng.integers(0, 2**31 - 1, size=n)]


def assemble_ptu_cnn(source: dict[str, np.ndarray], spec: NetworkSpec, seed: int,
                     phi: str = "relu") -> AssembledModel:
    """Pair a trained image source with a fresh target of the same topology.

    The target's layers are randomly initialized; one gate unit is created
    per junction.  The specs must agree below the output layer (the output
    layer may differ, which is how differing label spaces are handled).
    """
    if spec.is_recurrent:
        raise ConfigError("assemble_ptu_cnn: spec contains a recurrent cell")
    dims = junction_dims(spec)
    seeds = _spawn_seeds(seed, 1 + len(dims))
    target = build_cnn(spec, seeds[0])
    _check_shared_prefix(source, target, spec)
    ptus = [ptu_init(d, phi=phi, rng_seed=s) for d, s in zip(dims, seeds[1:])]
    return AssembledModel(topology=spec, source_params=_freeze_arrays(source),
                          target_params=target, ptus=ptus)


def assemble_ptu_rnn(source: dict[str, np.ndarray], target_spec: NetworkSpec,
                     seed: int, phi: str = "tanh") -> AssembledModel:
    """Pair a trained recurrent source with a fresh target cell and head.

    One gate unit is shared across every time step; the blended state is the
    target's recurrent carry.
    """
    if not target_spec.is_recurrent:
        raise ConfigError("assemble_ptu_rnn: spec has no recurrent cell")
    hidden = target_spec.layers[0].hidden
    if "layer0.wh" not in source or source["layer0.wh"].shape != (hidden, hidden):
        have = source.get("layer0.wh")
        raise ConfigError(
            f"hidden width mismatch: target cell is {hidden}, source carry is "
            f"{have.shape if have is not None else 'missing'}")
    seeds = _spawn_seeds(seed, 2)
    target = build_params(target_spec, seeds[0])
    _check_shared_prefix(source, target, target_spec)
    return AssembledModel(topology=target_spec, source_params=_freeze_arrays(source),
                          target_params=target,
                          ptus=[ptu_init(hidden, phi=phi, rng_seed=seeds[1])])


# ---------------------------------------------------------------------------
# forward passes

def _param_env(tape: Tape | None, named: dict[str, np.ndarray],
               frozen: frozenset[str], prefix: str = "") -> dict[str, Tensor]:
    env = {}
    for name, arr in named.items():
        t = Tensor(arr, dtype=arr.dtype)
        if tape is not None and name not in frozen:
            t = tape.watch(t)
        env[prefix + name] = t
    return env


def build_env(model, tape: Tape | None) -> dict[str, Tensor]:
    """Name -> Tensor map for a forward pass; tracked entries are trainable.

    Plain models use bare layer names.  Assemblies namespace the two networks
    as ``target.*`` (tracked) and ``source.*`` (constant) and expose unit
    weights as ``ptu{j}.w_r`` etc. (``ptu.w_r`` for the shared recurrent
    unit), all tracked.
    """
    if isinstance(model, PlainModel):
        return _param_env(tape, model.params, model.frozen)
    env = _param_env(tape, model.target_params, model.frozen_target, "target.")
    env.update(_param_env(None, model.source_params, frozenset(), "source."))
    for j, unit in enumerate(model.ptus):
        prefix = "ptu." if model.is_recurrent else f"ptu{j}."
        env.update(_param_env(tape, unit.arrays(), frozenset(), prefix))
    return env


def _apply_param_layer(layer, x: Tensor, get: Callable[[str], Tensor], k: int) -> Tensor:
    if isinstance(layer, Conv):
        if layer.separable:
            y = T.depthwise_separable_conv2d(x, get(f"layer{k}.dw"), get(f"layer{k}.pw"),
                                             stride=layer.stride, padding=layer.padding)
        else:
            y = T.conv2d(x, get(f"layer{k}.w"), stride=layer.stride, padding=layer.padding)
        return T.activation(layer.activation, T.bias_add(y, get(f"layer{k}.b"), axis=1))
    if isinstance(layer, Dense):
        y = T.bias_add(T.matmul(x, get(f"layer{k}.w")), get(f"layer{k}.b"))
        return T.activation(layer.activation, y)
    if isinstance(layer, Output):
        return T.bias_add(T.matmul(x, get(f"layer{k}.w")), get(f"layer{k}.b"))
    raise ConfigError(f"cannot apply {type(layer).__name__} as a parameterized layer")


def _run_image_layers(spec: NetworkSpec, get, x: Tensor,
                      hook=None, stop_after_junctions: bool = False) -> Tensor:
    """Walk the descriptors; ``hook(j, value)`` may replace each junction value."""
    fire = _junction_after(spec)
    last_fire = max(fire) if fire else -1
    k = 0
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, PARAM_LAYERS):
            x = _apply_param_layer(layer, x, get, k)
            k += 1
        elif isinstance(layer, Pool):
            x = T.max_pool2d(x, layer.size)
        elif isinstance(layer, Flatten):
            x = T.flatten(x)
        if hook is not None and i in fire:
            x = hook(fire[i], x)
        if stop_after_junctions and i == last_fire:
            return x
    return x


def _as_image_batch(spec: NetworkSpec, x: Tensor) -> Tensor:
    if x.data.ndim != 4 or x.shape[1:] != spec.input_shape:
        raise ShapeError(f"expected batch of shape (B,)+{spec.input_shape}, got {x.shape}")
    return x


def _as_sequence_batch(spec: NetworkSpec, x: Tensor) -> np.ndarray:
    steps, dims = spec.input_shape
    arr = x.data
    if arr.ndim == 4 and arr.shape[1] == 1:
        arr = arr.reshape(arr.shape[0], arr.shape[2], arr.shape[3])  # rows as steps
    if arr.ndim != 3 or arr.shape[1:] != (steps, dims):
        raise ShapeError(f"expected batch of shape (B, {steps}, {dims}), got {x.shape}")
    if arr.shape[1] == 0:
        raise ConfigError("zero-length input sequence")
    return arr


def _rnn_cell_step(get, prefix: str, k: int, x_t: Tensor, h: Tensor) -> Tensor:
    pre = T.add(T.matmul(x_t, get(f"{prefix}layer{k}.wx")),
                T.matmul(h, get(f"{prefix}layer{k}.wh")))
    return T.tanh(T.bias_add(pre, get(f"{prefix}layer{k}.b")))


def plain_forward(model: PlainModel, x: Tensor,
                  env: dict[str, Tensor] | None = None) -> Tensor:
    """Logits of a single network; ``env`` supplies tracked parameters."""
    if env is None:
        env = build_env(model, None)
    get = env.__getitem__
    spec = model.spec
    if not spec.is_recurrent:
        return _run_image_layers(spec, get, _as_image_batch(spec, x))
    arr = _as_sequence_batch(spec, x)
    batch, steps = arr.shape[0], arr.shape[1]
    h = T.zeros((batch, spec.layers[0].hidden), dtype=arr.dtype)
    for t in range(steps):
        h = _rnn_cell_step(get, "", 0, T.Tensor(arr[:, t, :], dtype=arr.dtype), h)
    return T.bias_add(T.matmul(h, get("layer1.w")), get("layer1.b"))


def forward(model, x: Tensor, track_gradients: bool = False,
            env: dict[str, Tensor] | None = None,
            force_r: float | None = None, force_z: float | None = None) -> ForwardResult:
    """Run a model: for an assembly, both networks plus the gate units.

    With ``track_gradients`` a fresh tape is created and the trainable
    parameters are watched on it; the tape and the parameter tensors come
    back in the result so the caller can run backward and apply updates.
    Gate forces propagate to every junction (used by the degeneracy checks).
    A plain model runs as itself, with an empty junction list.
    """
    tape = None
    if env is None:
        tape = Tape() if track_gradients else None
        env = build_env(model, tape)
    if isinstance(model, PlainModel):
        return ForwardResult(logits=plain_forward(model, x, env), tape=tape, env=env)
    get = env.__getitem__
    spec = model.topology
    outputs: list[PtuOutput] = []

    if not model.is_recurrent:
        xb = _as_image_batch(spec, x)
        sget = lambda name: get("source." + name)
        h_s: list[Tensor] = []
        collect = lambda j, v: (h_s.append(v), v)[1]
        _run_image_layers(spec, sget, xb, hook=collect, stop_after_junctions=True)

        def blend(j: int, v: Tensor) -> Tensor:
            unit = model.ptus[j]
            hs, ht = h_s[j], v
            shape = None
            if ht.data.ndim > 2:
                shape = ht.shape
                hs, ht = T.flatten(hs), T.flatten(ht)
            out = ptu_forward(unit, hs, ht, force_r=force_r, force_z=force_z,
                              layer_index=j,
                              w_r=get(f"ptu{j}.w_r"), w_z=get(f"ptu{j}.w_z"),
                              w_h=get(f"ptu{j}.w_h"))
            outputs.append(out)
            return T.reshape(out.combined, shape) if shape else out.combined

        tget = lambda name: get("target." + name)
        logits = _run_image_layers(spec, tget, xb, hook=blend)
        return ForwardResult(logits=logits, ptu_outputs=outputs, tape=tape, env=env)

    arr = _as_sequence_batch(spec, x)
    batch, steps = arr.shape[0], arr.shape[1]
    hidden = spec.layers[0].hidden
    unit = model.ptus[0]
    h_src = T.zeros((batch, hidden), dtype=arr.dtype)
    carry = T.zeros((batch, hidden), dtype=arr.dtype)
    for t in range(steps):
        x_t = T.Tensor(arr[:, t, :], dtype=arr.dtype)
        h_src = _rnn_cell_step(get, "source.", 0, x_t, h_src)
        h_tgt = _rnn_cell_step(get, "target.", 0, x_t, carry)
        out = ptu_forward(unit, h_src, h_tgt, force_r=force_r, force_z=force_z,
                          layer_index=t,
                          w_r=get("ptu.w_r"), w_z=get("ptu.w_z"), w_h=get("ptu.w_h"))
        outputs.append(out)
        carry = out.combined
    logits = T.bias_add(T.matmul(carry, get("target.layer1.w")), get("target.layer1.b"))
    return ForwardResult(logits=logits, ptu_outputs=outputs, tape=tape, env=env)


def predict(model, x: Tensor) -> np.ndarray:
    """Constant-parameter logits for either model flavour."""
    if isinstance(model, PlainModel):
        return plain_forward(model, x).data
    return forward(model, x).logits.data


def set_param(model, name: str, arr: np.ndarray) -> None:
    """Write an updated array back under a forward-pass parameter name."""
    if isinstance(model, PlainModel):
        if name in model.frozen:
            raise ConfigError(f"refusing to update frozen parameter {name}")
        model.params[name] = arr
        return
    if name.startswith("target."):
        bare = name.removeprefix("target.")
        if bare in model.frozen_target:
            raise ConfigError(f"refusing to update frozen parameter {name}")
        model.target_params[bare] = arr
        return
    if name.startswith("ptu"):
        prefix, part = name.split(".", 1)
        j = 0 if prefix == "ptu" else int(prefix.removeprefix("ptu"))
        setattr(model.ptus[j], part, arr)
        return
    raise ConfigError(f"refusing to update non-trainable parameter {name}")


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"PTUC"
CHECKPOINT_VERSION = 1


def save_checkpoint(params: dict[str, np.ndarray], path) -> None:
    """Write parameters in the toolkit's container format.

    Layout: magic "PTUC", version u16, then per array (sorted by name):
    name length u16, name bytes, rank u8, dims u32 each, float32 payload.
    Multi-byte fields are little-endian.  Sorting makes the byte stream a
    pure function of the contents.
    """
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<H", CHECKPOINT_VERSION))
        for name in sorted(params):
            arr = np.ascontiguousarray(params[name], dtype=np.float32)
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f4", copy=False).tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ParseError(f"bad checkpoint magic {blob[:4]!r}", offset=0)
    if len(blob) < 6:
        raise ParseError("truncated checkpoint header", offset=len(blob))
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ParseError(f"unsupported checkpoint version {version}", offset=4)
    pos = 6
    params: dict[str, np.ndarray] = {}

    def need(n: int, what: str):
        if pos + n > len(blob):
            raise ParseError(f"truncated checkpoint: expected {what}", offset=pos)

    while pos < len(blob):
        need(2, "name length")
        (nlen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        need(nlen, "name bytes")
        name = blob[pos:pos + nlen].decode("utf-8")
        pos += nlen
        need(1, "rank")
        rank = blob[pos]
        pos += 1
        need(4 * rank, "dims")
        dims = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        need(4 * count, f"payload of {name}")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(dims)
        pos += 4 * count
        params[name] = arr.astype(np.float32)
    return params
