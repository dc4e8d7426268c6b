"""CNN-2 / CNN-4 packet-series encoders and the classification/projection heads.

Parameters live in plain ``dict[str, Tensor]`` so that trainers can swap in
adapted (non-leaf) tensors, which is how MAML's inner loop stays on the tape.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ContractViolation, DataError
from .numerics import Tensor

VARIANTS = {
    "cnn2": {"filters": (32, 64), "latent_dim": 200},
    "cnn4": {"filters": (32, 64, 64, 64), "latent_dim": 500},
}
COSINE_SCALE = 10.0

Params = dict  # name -> Tensor


def he_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _param(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


@dataclass(frozen=True)
class EncoderSpec:
    variant: str = "cnn2"
    packets: int = 10
    features: int = 4
    filters: tuple = ()
    latent_dim: int = 0
    kernel: tuple = (3, 2)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown encoder variant {self.variant!r}")
        base = VARIANTS[self.variant]
        if not self.filters:
            object.__setattr__(self, "filters", base["filters"])
        if not self.latent_dim:
            object.__setattr__(self, "latent_dim", base["latent_dim"])
        object.__setattr__(self, "filters", tuple(int(f) for f in self.filters))
        object.__setattr__(self, "kernel", tuple(int(k) for k in self.kernel))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["filters"] = list(self.filters)
        d["kernel"] = list(self.kernel)
        return d


class Encoder:
    """conv -> batch-norm -> relu blocks, then a fully connected layer to ``latent_dim``.

    Convolutions are stride 1 with "same" zero padding and no pooling, so the
    flattened feature map keeps the full P x F resolution.
    """

    def __init__(self, spec: EncoderSpec, seed: int = 0):
        self.spec = spec
        rng = np.random.default_rng(seed)
        kh, kw = spec.kernel
        self.params: Params = {}
        self.bn_state: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        cin = 1
        for i, cout in enumerate(spec.filters):
            fan_in = cin * kh * kw
            self.params[f"conv{i}.weight"] = _param(he_uniform(rng, (cout, cin, kh, kw), fan_in))
            self.params[f"conv{i}.bias"] = _param(np.zeros(cout))
            self.params[f"bn{i}.gamma"] = _param(np.ones(cout))
            self.params[f"bn{i}.beta"] = _param(np.zeros(cout))
            self.bn_state[f"bn{i}"] = (np.zeros(cout), np.ones(cout))
            cin = cout
        flat = cin * spec.packets * spec.features
        self.params["fc.weight"] = _param(he_uniform(rng, (flat, spec.latent_dim), flat))
        self.params["fc.bias"] = _param(np.zeros(spec.latent_dim))

    @property
    def latent_dim(self) -> int:
        return self.spec.latent_dim

    def param_list(self) -> list[Tensor]:
        return list(self.params.values())

    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def forward(self, X, params: Mapping[str, Tensor] | None = None, training: bool = False,
                update_stats: bool = True) -> Tensor:
        """Embed a (B, P, F) batch into (B, latent_dim)."""
        p = self.params if params is None else params
        x = X if isinstance(X, Tensor) else Tensor(np.asarray(X, dtype=np.float64))
        spec = self.spec
        if x.ndim != 3 or x.shape[1:] != (spec.packets, spec.features):
            raise ContractViolation(f"encoder expects (B, {spec.packets}, {spec.features}), "
                                    f"got {x.shape}")
        bsz = x.shape[0]
        h = nx.reshape(x, (bsz, 1, spec.packets, spec.features))
        pads = nx.same_padding(*spec.kernel)
        for i in range(len(spec.filters)):
            h = nx.conv2d(h, p[f"conv{i}.weight"], p[f"conv{i}.bias"], padding=pads)
            rm, rv = self.bn_state[f"bn{i}"]
            h = nx.batch_norm(h, p[f"bn{i}.gamma"], p[f"bn{i}.beta"],
                              rm if update_stats else None, rv if update_stats else None,
                              training=training)
            h = nx.relu(h)
        h = nx.reshape(h, (bsz, -1))
        return nx.relu(nx.linear(h, p["fc.weight"], p["fc.bias"]))

    def embed(self, X, batch_size: int = 2048) -> np.ndarray:
        """Evaluation-mode embeddings as a plain array, no graph recorded."""
        X = np.asarray(X, dtype=np.float64)
        if len(X) == 0:
            return np.zeros((0, self.latent_dim))
        out = []
        with nx.no_grad():
            for i in range(0, len(X), batch_size):
                out.append(self.forward(X[i:i + batch_size], training=False).data)
        return np.concatenate(out)

    # -- state ---------------------------------------------------------------
    def state_arrays(self) -> dict[str, np.ndarray]:
        arrs = {f"param/{k}": v.data.copy() for k, v in self.params.items()}
        for k, (rm, rv) in self.bn_state.items():
            arrs[f"bn_state/{k}/mean"] = rm.copy()
            arrs[f"bn_state/{k}/var"] = rv.copy()
        return arrs

    def load_state_arrays(self, arrs: Mapping[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            src = arrs[f"param/{k}"]
            if src.shape != p.data.shape:
                raise DataError(f"checkpoint shape mismatch for {k}")
            p.data = np.array(src, dtype=np.float64)
        for k in self.bn_state:
            self.bn_state[k] = (np.array(arrs[f"bn_state/{k}/mean"], dtype=np.float64),
                                np.array(arrs[f"bn_state/{k}/var"], dtype=np.float64))

    def clone(self) -> "Encoder":
        other = Encoder.__new__(Encoder)
        other.spec = self.spec
        other.params = {k: _param(v.data) for k, v in self.params.items()}
        other.bn_state = {k: (rm.copy(), rv.copy()) for k, (rm, rv) in self.bn_state.items()}
        return other

    def fingerprint(self) -> bytes:
        return b"".join(v.tobytes() for v in self.state_arrays().values())


# ---------------------------------------------------------------------------
# heads
# ---------------------------------------------------------------------------

HEAD_KINDS = ("linear", "class_embedding", "logistic", "nearest_neighbor", "prototype",
              "relation", "projection")


def head_params(d: int, c: int) -> int:
    """Parameter count of a linear head (weights plus bias)."""
    return d * c + c


def init_linear_head(d: int, c: int, rng: np.random.Generator, bias: bool = True) -> Params:
    if c < 2:
        raise ConfigError("a classification head needs at least two classes")
    p = {"weight": _param(he_uniform(rng, (d, c), d))}
    if bias:
        p["bias"] = _param(np.zeros(c))
    return p


def init_class_embedding(d: int, c: int, rng: np.random.Generator) -> Params:
    return init_linear_head(d, c, rng, bias=False)


def linear_logits(head: Params, z: Tensor) -> Tensor:
    return nx.linear(z, head["weight"], head.get("bias"))


def cosine_logits(head: Params, z: Tensor, scale: float = COSINE_SCALE) -> Tensor:
    """scale * cos(w_k, z) for every class column w_k."""
    zn = nx.l2_normalize(z, axis=1)
    wn = nx.l2_normalize(head["weight"], axis=0)
    return nx.scale(nx.matmul(zn, wn), scale)


def l2_normalize_rows(Z: np.ndarray) -> np.ndarray:
    Z = np.asarray(Z, dtype=np.float64)
    n = np.linalg.norm(Z, axis=-1, keepdims=True)
    return np.divide(Z, n, out=np.zeros_like(Z), where=n > 0)


def _sigmoid(x):
    return np.where(x >= 0, 1 / (1 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1 + np.exp(-np.abs(x))))


@dataclass
class LogisticHead:
    """One-vs-rest logistic regression on L2-normalized embeddings."""

    weight: np.ndarray
    bias: np.ndarray
    iterations: int = 0

    def probs(self, Z) -> np.ndarray:
        return _sigmoid(l2_normalize_rows(Z) @ self.weight + self.bias)

    def predict(self, Z) -> np.ndarray:
        return np.argmax(self.probs(Z), axis=1)


def fit_logistic(Z, y, n_classes: int, max_iter: int = 1000, tol: float = 1e-6,
                 lr: float = 1.0) -> LogisticHead:
    """Full-batch gradient descent on the mean one-vs-rest binary cross-entropy.

    Stops once the gradient norm drops below ``tol`` or after ``max_iter`` steps.
    """
    if n_classes < 2:
        raise ConfigError("logistic head needs at least two classes")
    X = l2_normalize_rows(Z)
    n, d = X.shape
    Y = np.zeros((n, n_classes))
    Y[np.arange(n), np.asarray(y)] = 1.0
    W = np.zeros((d, n_classes))
    b = np.zeros(n_classes)
    it = 0
    for it in range(1, max_iter + 1):
        err = (_sigmoid(X @ W + b) - Y) / n
        gW = X.T @ err
        gb = err.sum(axis=0)
        if math.sqrt(float((gW ** 2).sum() + (gb ** 2).sum())) < tol:
            break
        W -= lr * gW
        b -= lr * gb
    return LogisticHead(W, b, it)


def logistic_probs(head: LogisticHead, Z) -> np.ndarray:
    return head.probs(Z)


def nn_predict(support_Z, support_y, query_Z, normalize: bool = True) -> np.ndarray:
    """1-nearest-neighbour labels; ties go to the lowest label id."""
    S = np.asarray(support_Z, dtype=np.float64)
    Q = np.asarray(query_Z, dtype=np.float64)
    labels = np.asarray(support_y)
    if len(S) == 0:
        raise ContractViolation("nn_predict needs at least one support embedding")
    single = Q.ndim == 1
    Q = np.atleast_2d(Q)
    if normalize:
        S, Q = l2_normalize_rows(S), l2_normalize_rows(Q)
    dist = (Q ** 2).sum(1)[:, None] + (S ** 2).sum(1)[None, :] - 2.0 * Q @ S.T
    best = dist.min(axis=1, keepdims=True)
    tied = dist <= best + 1e-12 * np.maximum(1.0, np.abs(best))
    cand = np.where(tied, labels[None, :], np.iinfo(np.int64).max)
    out = cand.min(axis=1)
    return out[0] if single else out


def prototypes(support_Z, support_y, ways: int | None = None):
    """Class means of the support embeddings, row k = class k.

    Works on arrays or on Tensors (the latter stays differentiable).
    """
    y = np.asarray(support_y)
    ways = int(y.max()) + 1 if ways is None else ways
    onehot = np.zeros((ways, len(y)))
    onehot[y, np.arange(len(y))] = 1.0
    counts = onehot.sum(axis=1, keepdims=True)
    if np.any(counts == 0):
        raise ContractViolation("prototypes: a class has no support embedding")
    avg = onehot / counts
    if isinstance(support_Z, Tensor):
        return nx.matmul(Tensor(avg), support_Z)
    return avg @ np.asarray(support_Z, dtype=np.float64)


def proto_logits(protos, z):
    """Negative squared euclidean distance to each prototype."""
    if isinstance(protos, Tensor) or isinstance(z, Tensor):
        return nx.neg(nx.sq_euclidean(nx.as_tensor(z), nx.as_tensor(protos)))
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    protos = np.asarray(protos, dtype=np.float64)
    return -((z ** 2).sum(1)[:, None] + (protos ** 2).sum(1)[None, :] - 2 * z @ protos.T)


def init_relation_module(d: int, rng: np.random.Generator, hidden: int = 64) -> Params:
    return {
        "w1": _param(he_uniform(rng, (2 * d, hidden), 2 * d)),
        "b1": _param(np.zeros(hidden)),
        # a small output layer starts every score near 0.5, away from sigmoid saturation
        "w2": _param(0.01 * he_uniform(rng, (hidden, 1), hidden)),
        "b2": _param(np.zeros(1)),
    }


def relation_scores(module: Params, protos, queries) -> Tensor:
    """Scores in [0, 1] for every (query, class) pair, shape (Q, N)."""
    protos, queries = nx.as_tensor(protos), nx.as_tensor(queries)
    n, d = protos.shape
    q = queries.shape[0]
    pb = nx.broadcast_to(nx.reshape(protos, (1, n, d)), (q, n, d))
    qb = nx.broadcast_to(nx.reshape(queries, (q, 1, d)), (q, n, d))
    pairs = nx.reshape(nx.concat([pb, qb], axis=2), (q * n, 2 * d))
    h = nx.relu(nx.linear(pairs, module["w1"], module["b1"]))
    s = nx.sigmoid(nx.linear(h, module["w2"], module["b2"]))
    return nx.reshape(s, (q, n))


def init_projection(d: int, rng: np.random.Generator, hidden: int | None = None,
                    out_dim: int = 64) -> Params:
    hidden = hidden or d
    return {
        "w1": _param(he_uniform(rng, (d, hidden), d)),
        "b1": _param(np.zeros(hidden)),
        "w2": _param(he_uniform(rng, (hidden, out_dim), hidden)),
        "b2": _param(np.zeros(out_dim)),
    }


def projection(module: Params, z) -> Tensor:
    """Two-layer MLP followed by L2 normalization."""
    h = nx.relu(nx.linear(nx.as_tensor(z), module["w1"], module["b1"]))
    return nx.l2_normalize(nx.linear(h, module["w2"], module["b2"]), axis=1)


def param_count(spec: EncoderSpec, head: str = "linear", n_classes: int = 0,
                relation_hidden: int = 64) -> tuple[int, int]:
    """(trunk, head) parameter counts of the realized architecture."""
    kh, kw = spec.kernel
    trunk, cin = 0, 1
    for cout in spec.filters:
        trunk += cout * cin * kh * kw + cout  # conv weight + bias
        trunk += 2 * cout                     # batch-norm gamma, beta
        cin = cout
    trunk += cin * spec.packets * spec.features * spec.latent_dim + spec.latent_dim
    d = spec.latent_dim
    if head == "linear":
        h = head_params(d, n_classes)
    elif head == "class_embedding":
        h = d * n_classes
    elif head == "logistic":
        h = head_params(d, n_classes)
    elif head == "relation":
        h = 2 * d * relation_hidden + relation_hidden + relation_hidden + 1
    elif head in ("nearest_neighbor", "prototype"):
        h = 0
    else:
        raise ConfigError(f"no parameter count for head {head!r}")
    return trunk, h


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def params_to_arrays(prefix: str, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    return {f"{prefix}/{k}": v.data.copy() for k, v in params.items()}


def arrays_to_params(prefix: str, arrs: Mapping[str, np.ndarray]) -> Params:
    pre = prefix + "/"
    return {k[len(pre):]: _param(v) for k, v in arrs.items() if k.startswith(pre)}


def save_checkpoint(path, encoder: Encoder, heads: Mapping[str, Params] | None = None,
                    meta: dict | None = None) -> Path:
    """Write an ``.npz`` holding the spec, every float64 tensor and JSON metadata."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrs = {f"encoder/{k}": v for k, v in encoder.state_arrays().items()}
    for name, params in (heads or {}).items():
        arrs.update(params_to_arrays(f"head/{name}", params))
    header = {"encoder_spec": encoder.spec.to_dict(), "heads": sorted(heads or {}),
              "meta": meta or {}}
    arrs["__meta__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrs)
    return path


def load_checkpoint(path) -> tuple[Encoder, dict[str, Params], dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as z:
        arrs = {k: z[k] for k in z.files}
    header = json.loads(bytes(arrs.pop("__meta__")).decode())
    sd = header["encoder_spec"]
    spec = EncoderSpec(sd["variant"], sd["packets"], sd["features"], tuple(sd["filters"]),
                       sd["latent_dim"], tuple(sd["kernel"]))
    enc = Encoder(spec)
    enc.load_state_arrays({k[len("encoder/"):]: v for k, v in arrs.items()
                           if k.startswith("encoder/")})
    heads = {name: arrays_to_params(f"head/{name}", arrs) for name in header["heads"]}
    return enc, heads, header["meta"]
