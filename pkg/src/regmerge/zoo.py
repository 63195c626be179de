"""Desk-scale model zoo: linear classifier, MLP and a mini transformer block.

Models are plain parameter dicts (NamedTensorMap) with hand-written forward
and backward passes in float64 numpy. Forward can record the inputs of every
designated linear layer (the hook analogue used for Gram statistics) and the
post-activation values used for activation matching.

Initialization uses the Philox counter-based generator (see data.rng_for),
so checkpoints are reproducible bit-exact across platforms. Weights are
drawn i.i.d. uniform in +-sqrt(6 / (fan_in + fan_out)); biases start at
zero and layernorm gains at one.

Weight convention: a linear layer named ``L`` stores ``L.weight`` of shape
(d_in, d_out) and ``L.bias`` of shape (d_out,); it computes x @ W + b, so a
layer's Gram matrix X^T X is d_in x d_in and left-multiplies W directly.

Classification heads carry the ``head.`` prefix so merge configs can
exclude them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .data import Dataset, rng_for
from .tensorfile import NamedTensorMap

ARCHITECTURES = ("linear", "mlp", "mini_transformer")
NUM_HEADS = 2
FFN_MULT = 2
LN_EPS = 1e-5

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


@dataclass(frozen=True)
class ModelSpec:
    architecture: str
    input_dim: int
    num_classes: int
    hidden_dim: int = 0
    depth: int = 1
    activation: str = "gelu"
    layernorm: bool = True        # mini_transformer only
    multilabel: bool = False      # per-class sigmoid + BCE instead of softmax

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture: {self.architecture!r}")
        if self.input_dim < 1 or self.num_classes < 1:
            raise ValueError("dims must be >= 1")
        if self.architecture != "linear":
            if self.hidden_dim < 1:
                raise ValueError("hidden_dim must be >= 1")
        if self.architecture == "mlp" and self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.architecture == "mini_transformer" and self.hidden_dim % NUM_HEADS:
            raise ValueError(f"hidden_dim must be divisible by {NUM_HEADS} heads")
        if self.activation not in ("gelu", "relu"):
            raise ValueError(f"unknown activation: {self.activation!r}")

    def to_metadata(self) -> dict[str, str]:
        return {"spec": json.dumps(self.__dict__, sort_keys=True)}

    @staticmethod
    def from_metadata(metadata: dict[str, str]) -> "ModelSpec":
        return ModelSpec(**json.loads(metadata["spec"]))


@dataclass
class ModelInstance:
    spec: ModelSpec
    params: NamedTensorMap
    linear_layer_names: list[str]

    def replaced(self, params: NamedTensorMap) -> "ModelInstance":
        return ModelInstance(self.spec, params, list(self.linear_layer_names))


@dataclass
class ForwardTrace:
    logits: np.ndarray
    layer_inputs: dict[str, np.ndarray] = field(default_factory=dict)
    layer_activations: dict[str, np.ndarray] = field(default_factory=dict)


def _linear_layer_names(spec: ModelSpec) -> list[str]:
    if spec.architecture == "linear":
        return ["head"]
    if spec.architecture == "mlp":
        return [f"mlp.fc{k + 1}" for k in range(spec.depth)] + ["head"]
    return ["attn.wq", "attn.wk", "attn.wv", "attn.wo", "ffn.fc1", "ffn.fc2", "head"]


def _param_shapes(spec: ModelSpec) -> list[tuple[str, tuple, str]]:
    """Ordered (name, shape, init) list; init is 'weight', 'zero' or 'one'."""
    d, h, c = spec.input_dim, spec.hidden_dim, spec.num_classes
    out: list[tuple[str, tuple, str]] = []
    if spec.architecture == "linear":
        out += [("head.weight", (d, c), "weight"), ("head.bias", (c,), "zero")]
    elif spec.architecture == "mlp":
        prev = d
        for k in range(spec.depth):
            out += [(f"mlp.fc{k + 1}.weight", (prev, h), "weight"),
                    (f"mlp.fc{k + 1}.bias", (h,), "zero")]
            prev = h
        out += [("head.weight", (h, c), "weight"), ("head.bias", (c,), "zero")]
    else:
        out += [("embed.scale", (h,), "weight"), ("embed.pos", (d, h), "weight")]
        for name in ("attn.wq", "attn.wk", "attn.wv", "attn.wo"):
            out += [(f"{name}.weight", (h, h), "weight"), (f"{name}.bias", (h,), "zero")]
        if spec.layernorm:
            out += [("ln1.gain", (h,), "one"), ("ln1.bias", (h,), "zero")]
        out += [("ffn.fc1.weight", (h, FFN_MULT * h), "weight"),
                ("ffn.fc1.bias", (FFN_MULT * h,), "zero"),
                ("ffn.fc2.weight", (FFN_MULT * h, h), "weight"),
                ("ffn.fc2.bias", (h,), "zero")]
        if spec.layernorm:
            out += [("ln2.gain", (h,), "one"), ("ln2.bias", (h,), "zero")]
        out += [("head.weight", (h, c), "weight"), ("head.bias", (c,), "zero")]
    return out


def init_pretrained(spec: ModelSpec, seed: int) -> ModelInstance:
    """Deterministic shared initialization every agent fine-tunes from."""
    rng = rng_for(seed)
    entries: dict[str, np.ndarray] = {}
    for name, shape, kind in _param_shapes(spec):
        if kind == "weight":
            fan_in = shape[0] if len(shape) > 1 else 1
            fan_out = shape[-1]
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            entries[name] = rng.uniform(-limit, limit, size=shape)
        elif kind == "one":
            entries[name] = np.ones(shape)
        else:
            entries[name] = np.zeros(shape)
    params = NamedTensorMap(entries=entries,
                            metadata={**spec.to_metadata(), "seed": str(seed)})
    return ModelInstance(spec, params, _linear_layer_names(spec))


def model_from_checkpoint(tmap: NamedTensorMap) -> ModelInstance:
    spec = ModelSpec.from_metadata(tmap.metadata)
    return ModelInstance(spec, tmap, _linear_layer_names(spec))


# --- activations -----------------------------------------------------------

def _gelu(x):
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def _gelu_grad(x):
    return 0.5 * (1.0 + erf(x * _INV_SQRT2)) + x * _INV_SQRT2PI * np.exp(-0.5 * x * x)


def _act(spec: ModelSpec, x):
    return _gelu(x) if spec.activation == "gelu" else np.maximum(x, 0.0)


def _act_grad(spec: ModelSpec, x):
    return _gelu_grad(x) if spec.activation == "gelu" else (x > 0).astype(np.float64)


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _layernorm_fwd(x, gain, bias):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * inv
    return xhat * gain + bias, (xhat, inv, gain)


def _layernorm_bwd(dy, cache):
    xhat, inv, gain = cache
    dgain = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    dbias = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * gain
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dgain, dbias


# --- forward ---------------------------------------------------------------

def _forward_internal(model: ModelInstance, x: np.ndarray, record: bool):
    """Returns (logits, cache, trace). cache feeds the backward pass."""
    spec = model.spec
    p = model.params
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ValueError(f"expected input of shape (batch, {spec.input_dim}), got {x.shape}")
    trace = ForwardTrace(logits=None)
    cache: dict = {"x": x}

    def note_input(layer, val):
        if record:
            trace.layer_inputs[layer] = val.reshape(-1, val.shape[-1]).copy()

    if spec.architecture == "linear":
        note_input("head", x)
        logits = x @ p["head.weight"] + p["head.bias"]
    elif spec.architecture == "mlp":
        h = x
        pre = []
        for k in range(spec.depth):
            name = f"mlp.fc{k + 1}"
            note_input(name, h)
            u = h @ p[f"{name}.weight"] + p[f"{name}.bias"]
            a = _act(spec, u)
            pre.append((h, u))
            if record:
                trace.layer_activations[name] = a.copy()
            h = a
        cache["mlp"] = pre
        note_input("head", h)
        cache["head_in"] = h
        logits = h @ p["head.weight"] + p["head.bias"]
    else:
        B, T = x.shape
        H = spec.hidden_dim
        dh = H // NUM_HEADS
        h0 = x[:, :, None] * p["embed.scale"] + p["embed.pos"]
        note_input("attn.wq", h0)
        note_input("attn.wk", h0)
        note_input("attn.wv", h0)
        q = h0 @ p["attn.wq.weight"] + p["attn.wq.bias"]
        k = h0 @ p["attn.wk.weight"] + p["attn.wk.bias"]
        v = h0 @ p["attn.wv.weight"] + p["attn.wv.bias"]

        def heads(t):  # (B,T,H) -> (B,nh,T,dh)
            return t.reshape(B, T, NUM_HEADS, dh).transpose(0, 2, 1, 3)

        qh, kh, vh = heads(q), heads(k), heads(v)
        scores = qh @ kh.transpose(0, 1, 3, 2) / np.sqrt(dh)
        attn = _softmax(scores)
        ctx_h = attn @ vh
        ctx = ctx_h.transpose(0, 2, 1, 3).reshape(B, T, H)
        note_input("attn.wo", ctx)
        ao = ctx @ p["attn.wo.weight"] + p["attn.wo.bias"]
        r1 = h0 + ao
        if spec.layernorm:
            h1, ln1_cache = _layernorm_fwd(r1, p["ln1.gain"], p["ln1.bias"])
        else:
            h1, ln1_cache = r1, None
        note_input("ffn.fc1", h1)
        u = h1 @ p["ffn.fc1.weight"] + p["ffn.fc1.bias"]
        f = _act(spec, u)
        if record:
            trace.layer_activations["ffn.fc1"] = f.reshape(-1, f.shape[-1]).copy()
        note_input("ffn.fc2", f)
        ffn = f @ p["ffn.fc2.weight"] + p["ffn.fc2.bias"]
        r2 = h1 + ffn
        if spec.layernorm:
            h2, ln2_cache = _layernorm_fwd(r2, p["ln2.gain"], p["ln2.bias"])
        else:
            h2, ln2_cache = r2, None
        pooled = h2.mean(axis=1)
        note_input("head", pooled)
        logits = pooled @ p["head.weight"] + p["head.bias"]
        cache.update(h0=h0, qh=qh, kh=kh, vh=vh, attn=attn, ctx=ctx,
                     ln1=ln1_cache, h1=h1, u=u, f=f, ln2=ln2_cache,
                     pooled=pooled, T=T, dh=dh)

    trace.logits = logits
    return logits, cache, trace


def forward(model: ModelInstance, x, record: bool = False) -> ForwardTrace:
    _, _, trace = _forward_internal(model, x, record)
    return trace


# --- backward --------------------------------------------------------------

def _backward_internal(model: ModelInstance, cache: dict, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    spec = model.spec
    p = model.params
    g: dict[str, np.ndarray] = {}
    x = cache["x"]

    if spec.architecture == "linear":
        g["head.weight"] = x.T @ dlogits
        g["head.bias"] = dlogits.sum(axis=0)
        return g

    if spec.architecture == "mlp":
        h = cache["head_in"]
        g["head.weight"] = h.T @ dlogits
        g["head.bias"] = dlogits.sum(axis=0)
        dh = dlogits @ p["head.weight"].T
        for k in reversed(range(spec.depth)):
            name = f"mlp.fc{k + 1}"
            h_in, u = cache["mlp"][k]
            du = dh * _act_grad(spec, u)
            g[f"{name}.weight"] = h_in.T @ du
            g[f"{name}.bias"] = du.sum(axis=0)
            dh = du @ p[f"{name}.weight"].T
        return g

    B, T, dh_dim = x.shape[0], cache["T"], cache["dh"]
    H = spec.hidden_dim
    pooled, h1, f, u = cache["pooled"], cache["h1"], cache["f"], cache["u"]
    g["head.weight"] = pooled.T @ dlogits
    g["head.bias"] = dlogits.sum(axis=0)
    dpooled = dlogits @ p["head.weight"].T
    dh2 = np.repeat(dpooled[:, None, :] / T, T, axis=1)
    if spec.layernorm:
        dr2, g["ln2.gain"], g["ln2.bias"] = _layernorm_bwd(dh2, cache["ln2"])
    else:
        dr2 = dh2
    dh1 = dr2.copy()
    dffn = dr2
    f2 = f.reshape(-1, f.shape[-1])
    g["ffn.fc2.weight"] = f2.T @ dffn.reshape(-1, H)
    g["ffn.fc2.bias"] = dffn.sum(axis=(0, 1))
    df = dffn @ p["ffn.fc2.weight"].T
    du = df * _act_grad(spec, u)
    h1_2 = h1.reshape(-1, H)
    g["ffn.fc1.weight"] = h1_2.T @ du.reshape(-1, du.shape[-1])
    g["ffn.fc1.bias"] = du.sum(axis=(0, 1))
    dh1 += du @ p["ffn.fc1.weight"].T
    if spec.layernorm:
        dr1, g["ln1.gain"], g["ln1.bias"] = _layernorm_bwd(dh1, cache["ln1"])
    else:
        dr1 = dh1
    dh0 = dr1.copy()
    dao = dr1
    ctx = cache["ctx"]
    g["attn.wo.weight"] = ctx.reshape(-1, H).T @ dao.reshape(-1, H)
    g["attn.wo.bias"] = dao.sum(axis=(0, 1))
    dctx = dao @ p["attn.wo.weight"].T
    dctx_h = dctx.reshape(B, T, NUM_HEADS, dh_dim).transpose(0, 2, 1, 3)
    attn, qh, kh, vh = cache["attn"], cache["qh"], cache["kh"], cache["vh"]
    dattn = dctx_h @ vh.transpose(0, 1, 3, 2)
    dvh = attn.transpose(0, 1, 3, 2) @ dctx_h
    dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
    dscores /= np.sqrt(dh_dim)
    dqh = dscores @ kh
    dkh = dscores.transpose(0, 1, 3, 2) @ qh

    def unheads(t):  # (B,nh,T,dh) -> (B,T,H)
        return t.transpose(0, 2, 1, 3).reshape(B, T, H)

    dq, dk, dv = unheads(dqh), unheads(dkh), unheads(dvh)
    h0 = cache["h0"]
    h0_2 = h0.reshape(-1, H)
    for name, dt in (("attn.wq", dq), ("attn.wk", dk), ("attn.wv", dv)):
        g[f"{name}.weight"] = h0_2.T @ dt.reshape(-1, H)
        g[f"{name}.bias"] = dt.sum(axis=(0, 1))
        dh0 += dt @ p[f"{name}.weight"].T
    g["embed.scale"] = (dh0 * x[:, :, None]).sum(axis=(0, 1))
    g["embed.pos"] = dh0.sum(axis=0)
    return g


def grads_from_dlogits(model: ModelInstance, x, dlogits) -> dict[str, np.ndarray]:
    """Backprop an arbitrary logits cotangent; used for Fisher collection."""
    _, cache, _ = _forward_internal(model, x, record=False)
    return _backward_internal(model, cache, np.asarray(dlogits, dtype=np.float64))


def loss_and_grads(model: ModelInstance, x, y) -> tuple[float, NamedTensorMap]:
    """Mean cross-entropy loss and exact gradients for every parameter.

    Single-label: softmax cross-entropy over integer labels (batch,).
    Multi-label: per-class sigmoid BCE over a 0/1 matrix (batch, classes),
    summed over classes and averaged over the batch.
    """
    logits, cache, _ = _forward_internal(model, x, record=False)
    n = logits.shape[0]
    if model.spec.multilabel:
        y = np.asarray(y, dtype=np.float64)
        if y.shape != logits.shape:
            raise ValueError(f"multilabel targets must have shape {logits.shape}")
        # stable log(1 + exp(...)) based BCE
        loss = float(np.mean(np.sum(
            np.logaddexp(0.0, logits) - y * logits, axis=1)))
        s = 1.0 / (1.0 + np.exp(-logits))
        dlogits = (s - y) / n
    else:
        y = np.asarray(y, dtype=np.int64)
        if y.ndim != 1 or y.shape[0] != n:
            raise ValueError("labels must be a flat integer vector matching the batch")
        if y.min(initial=0) < 0 or y.max(initial=0) >= model.spec.num_classes:
            raise ValueError("label out of range")
        probs = _softmax(logits)
        loss = float(-np.mean(np.log(probs[np.arange(n), y])))
        dlogits = probs.copy()
        dlogits[np.arange(n), y] -= 1.0
        dlogits /= n
    grads = _backward_internal(model, cache, dlogits)
    gmap = NamedTensorMap(entries={k: grads[k] for k in model.params.keys()})
    return loss, gmap


# --- training --------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.1
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0


def _accuracy_of(model: ModelInstance, ds: Dataset) -> float:
    logits = forward(model, ds.x).logits
    if model.spec.multilabel:
        pred = (logits > 0).astype(np.int64)
        return float((pred == ds.y).mean())
    return float((logits.argmax(axis=1) == ds.y).mean())


def train(model: ModelInstance, train_set: Dataset, val_set: Dataset,
          cfg: TrainConfig) -> ModelInstance:
    """Plain minibatch SGD; keeps the parameters of the best validation
    epoch (ties resolved toward the earlier epoch). epochs == 0 or lr == 0
    leave the initialization untouched."""
    if len(train_set) == 0:
        raise ValueError("empty training set")
    rng = rng_for(cfg.seed)
    params = model.params.copy()
    current = model.replaced(params)
    best_params = params.copy()
    best_metric = _accuracy_of(current, val_set) if len(val_set) else -np.inf
    for _ in range(cfg.epochs):
        order = rng.permutation(len(train_set))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            _, grads = loss_and_grads(current, train_set.x[idx], train_set.y[idx])
            for key in params.keys():
                params.entries[key] = params.entries[key] - cfg.lr * grads[key]
        if len(val_set):
            metric = _accuracy_of(current, val_set)
            if metric > best_metric:
                best_metric = metric
                best_params = params.copy()
        else:
            best_params = params.copy()
    return model.replaced(best_params)


def predict(model: ModelInstance, x) -> np.ndarray:
    logits = forward(model, x).logits
    if model.spec.multilabel:
        return (logits > 0).astype(np.int64)
    return logits.argmax(axis=1)
