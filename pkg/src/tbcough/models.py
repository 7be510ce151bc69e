"""Logistic-regression baseline, BiLSTM and BiLSTM with attention.

All architectures share :class:`ModelParams`, a flat bundle of named
float32 arrays. Inputs are standardised per bin with statistics stored in
the bundle (``norm.mean`` / ``norm.std``); the recurrent forward functions
take already-standardised tensors so that input-space optimisation can work
directly in the space the network sees.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .features import FeatureMatrix

ARCHS = ("lr", "bilstm", "bilstm-att")
HIDDEN = 32


class ModelError(ValueError):
    pass


@dataclass
class ModelParams:
    arch: str
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ModelError(f"unknown architecture {self.arch!r}")

    @property
    def n_in(self) -> int:
        return int(self.tensors["norm.mean"].shape[0])

    @property
    def trainable(self) -> list[str]:
        # ge2e.b shifts both class logits of the GE2E softmax equally and so has
        # an identically zero gradient; it is kept for provenance only
        return [k for k in self.tensors if not k.startswith("norm.") and k != "ge2e.b"]

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, {k: v.copy() for k, v in self.tensors.items()}, dict(self.meta))

    def digest(self) -> str:
        h = hashlib.sha256(self.arch.encode())
        for k in sorted(self.tensors):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.tensors[k]).tobytes())
        return h.hexdigest()

    def as_tensors(self, requires_grad: bool = False, dtype=None) -> dict[str, ad.Tensor]:
        out = {}
        for k, v in self.tensors.items():
            arr = v if dtype is None else v.astype(dtype)
            out[k] = ad.Tensor(arr, requires_grad=requires_grad and not k.startswith("norm."))
        return out


def init_params(arch: str, n_in: int, seed: int = 0, hidden: int = HIDDEN,
                project_query: bool = True) -> ModelParams:
    """Uniform(+-1/sqrt(fan_in)) weights; LSTM forget-gate bias 1, other LSTM biases 0."""
    rng = np.random.default_rng(seed)
    f32 = np.float32

    def unif(shape, fan_in):
        k = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-k, k, size=shape).astype(f32)

    t: dict[str, np.ndarray] = {
        "norm.mean": np.zeros(n_in, f32),
        "norm.std": np.ones(n_in, f32),
    }
    if arch == "lr":
        t["lr.w"] = np.zeros(n_in, f32)
        t["lr.b"] = np.zeros(1, f32)
        return ModelParams(arch, t, {"n_in": n_in})
    if arch not in ARCHS:
        raise ModelError(f"unknown architecture {arch!r}")
    H = hidden
    for d in ("fwd", "bwd"):
        t[f"{d}.w_ih"] = unif((n_in, 4 * H), n_in)
        t[f"{d}.w_hh"] = unif((H, 4 * H), H)
        b = np.zeros(4 * H, f32)
        b[H:2 * H] = 1.0
        t[f"{d}.b"] = b
    if arch == "bilstm-att" and project_query:
        t["att.w"] = unif((2 * H, 2 * H), 2 * H)
        t["att.b"] = np.zeros(2 * H, f32)
    if arch == "bilstm-att":
        # GE2E similarity scale and offset travel with the model they were trained with
        t["ge2e.w"] = np.array([10.0], f32)
        t["ge2e.b"] = np.array([-5.0], f32)
    t["head.w1"] = unif((2 * H, H), 2 * H)
    t["head.b1"] = unif((H,), 2 * H)
    t["head.w2"] = unif((H, 2), H)
    t["head.b2"] = unif((2,), H)
    meta = {"n_in": n_in, "hidden": H, "keep_prob": 0.5,
            "project_query": bool(project_query and arch == "bilstm-att")}
    return ModelParams(arch, t, meta)


def set_normalizer(params: ModelParams, matrices: Sequence[np.ndarray]) -> None:
    """Per-bin mean/std over every frame of the given training matrices."""
    stacked = np.concatenate([np.asarray(m) for m in matrices], axis=0)
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)
    std[std < 1e-6] = 1.0
    params.tensors["norm.mean"] = mean.astype(np.float32)
    params.tensors["norm.std"] = std.astype(np.float32)


# -- batching ------------------------------------------------------------------

@dataclass
class Batch:
    x: np.ndarray          # (B, T, d) standardised, zero on padded frames
    lengths: np.ndarray    # (B,)
    mask: np.ndarray       # (B, T) 1.0 on true frames

    @property
    def size(self) -> int:
        return len(self.lengths)


def make_batch(params: ModelParams, matrices: Sequence, pad_to: int | None = None,
               dtype=np.float32) -> Batch:
    mats = [m.values if isinstance(m, FeatureMatrix) else np.asarray(m) for m in matrices]
    if not mats:
        raise ModelError("empty batch")
    lengths = np.array([len(m) for m in mats])
    if np.any(lengths == 0):
        raise ModelError("zero-length sample in batch")
    d = params.n_in
    for m in mats:
        if m.ndim != 2 or m.shape[1] != d:
            raise ModelError(f"feature width {m.shape[-1]} does not match model input {d}")
    T = int(lengths.max()) if pad_to is None else int(pad_to)
    if T < lengths.max():
        raise ModelError("pad_to shorter than the longest sample")
    mean, std = params.tensors["norm.mean"], params.tensors["norm.std"]
    x = np.zeros((len(mats), T, d), dtype=dtype)
    mask = np.zeros((len(mats), T), dtype=dtype)
    for i, m in enumerate(mats):
        x[i, :len(m)] = (m - mean) / std
        mask[i, :len(m)] = 1.0
    return Batch(x, lengths, mask)


# -- recurrent forward ---------------------------------------------------------

class Output(NamedTuple):
    logits: ad.Tensor
    q: ad.Tensor
    attention: ad.Tensor | None
    embedding: ad.Tensor


def encode(w: dict[str, ad.Tensor], x: ad.Tensor, mask: np.ndarray):
    """Per-step BiLSTM outputs (B, T, 2H) and the summary q (B, 2H)."""
    T = x.shape[1]
    out_f = ad.lstm(x, mask, w["fwd.w_ih"], w["fwd.w_hh"], w["fwd.b"])
    out_b = ad.lstm(x, mask, w["bwd.w_ih"], w["bwd.w_hh"], w["bwd.b"], reverse=True)
    steps = ad.concat([out_f, out_b], axis=2)
    # the forward state is carried through padding, so step T-1 is the true last frame
    q = ad.concat([out_f[:, T - 1, :], out_b[:, 0, :]], axis=1)
    return steps, q


def attend(w: dict[str, ad.Tensor], steps: ad.Tensor, q: ad.Tensor, mask: np.ndarray):
    """Scaled dot-product attention of (projected) q over the per-step outputs."""
    B, T, D = steps.shape
    query = q @ w["att.w"] + w["att.b"] if "att.w" in w else q
    scores = (steps @ query.reshape(B, D, 1)).reshape(B, T) * (1.0 / np.sqrt(D))
    alpha = ad.masked_softmax(scores, mask > 0)
    e = (alpha.reshape(B, 1, T) @ steps).reshape(B, D)
    return alpha, e


def head(w: dict[str, ad.Tensor], z: ad.Tensor, keep_prob: float, train: bool,
         rng: np.random.Generator | None) -> ad.Tensor:
    z = ad.dropout(z, keep_prob, rng, train)
    hidden = ad.relu(z @ w["head.w1"] + w["head.b1"])
    return hidden @ w["head.w2"] + w["head.b2"]


def forward(arch: str, w: dict[str, ad.Tensor], x: ad.Tensor, mask: np.ndarray,
            train: bool = False, rng: np.random.Generator | None = None,
            keep_prob: float = 0.5) -> Output:
    if arch == "lr":
        raise ModelError("forward() is for the recurrent architectures")
    steps, q = encode(w, x, mask)
    if arch == "bilstm-att":
        alpha, e = attend(w, steps, q, mask)
        return Output(head(w, e, keep_prob, train, rng), q, alpha, e)
    return Output(head(w, q, keep_prob, train, rng), q, None, q)


def bilstm_forward(params: ModelParams, batch: Batch, train_mode: bool = False,
                   rng: np.random.Generator | None = None) -> Output:
    if params.arch != "bilstm":
        raise ModelError(f"expected bilstm parameters, got {params.arch}")
    return forward("bilstm", params.as_tensors(), ad.Tensor(batch.x), batch.mask,
                   train_mode, rng, params.meta.get("keep_prob", 0.5))


def att_forward(params: ModelParams, batch: Batch, train_mode: bool = False,
                rng: np.random.Generator | None = None) -> Output:
    if params.arch != "bilstm-att":
        raise ModelError(f"expected bilstm-att parameters, got {params.arch}")
    return forward("bilstm-att", params.as_tensors(), ad.Tensor(batch.x), batch.mask,
                   train_mode, rng, params.meta.get("keep_prob", 0.5))


def tb_probability(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e[:, 1] / e.sum(axis=1)


# -- logistic regression -------------------------------------------------------

def lr_fit(frames: np.ndarray, labels: np.ndarray, l2_strength: float = 1.0,
           standardize: bool = True) -> ModelParams:
    """L2-penalised maximum-likelihood LR on individual frames.

    Minimises sum(log-loss) + l2_strength/2 * ||w||^2 (intercept unpenalised).
    """
    from sklearn.linear_model import LogisticRegression

    X = np.asarray(frames, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    if X.ndim == 1:
        X = X[:, None]
    if len(np.unique(y)) < 2:
        raise ModelError("lr_fit needs frames from both classes")
    params = init_params("lr", X.shape[1])
    if standardize:
        set_normalizer(params, [X])
    Z = (X - params.tensors["norm.mean"]) / params.tensors["norm.std"]
    clf = LogisticRegression(C=1.0 / l2_strength, solver="lbfgs", max_iter=5000, tol=1e-10)
    clf.fit(Z, y)
    params.tensors["lr.w"] = clf.coef_[0].astype(np.float32)
    params.tensors["lr.b"] = clf.intercept_.astype(np.float32)
    params.meta["l2_strength"] = l2_strength
    return params


def lr_frame_probabilities(params: ModelParams, values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    if values.shape[1] != params.n_in:
        raise ModelError(f"feature width {values.shape[1]} does not match model input {params.n_in}")
    z = (values - params.tensors["norm.mean"]) / params.tensors["norm.std"]
    logit = z @ params.tensors["lr.w"].astype(np.float64) + float(params.tensors["lr.b"][0])
    return 0.5 * (np.tanh(0.5 * logit) + 1.0)


def lr_predict_cough(params: ModelParams, features) -> float:
    """Mean of the per-frame TB probabilities."""
    values = features.values if isinstance(features, FeatureMatrix) else features
    return float(lr_frame_probabilities(params, values).mean())


def lr_loss(params: ModelParams, frames: np.ndarray, labels: np.ndarray,
            w: np.ndarray | None = None, b: float | None = None) -> float:
    """The objective lr_fit minimises, evaluated at (w, b) or the fitted values."""
    X = np.asarray(frames, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    w = params.tensors["lr.w"].astype(np.float64) if w is None else np.asarray(w, np.float64)
    b = float(params.tensors["lr.b"][0]) if b is None else float(b)
    z = (X - params.tensors["norm.mean"]) / params.tensors["norm.std"]
    logit = z @ w + b
    y = np.asarray(labels)
    nll = np.logaddexp(0.0, logit) - y * logit
    return float(nll.sum() + 0.5 * params.meta.get("l2_strength", 1.0) * (w @ w))


# -- uniform prediction ------------------------------------------------------

def predict(params: ModelParams, matrices: Sequence, batch_size: int = 128,
            return_embeddings: bool = False):
    """TB probability per cough (eval mode), batching by length to limit padding."""
    mats = [m.values if isinstance(m, FeatureMatrix) else np.asarray(m) for m in matrices]
    if params.arch == "lr":
        probs = np.array([lr_predict_cough(params, m) for m in mats])
        return (probs, None) if return_embeddings else probs
    order = np.argsort([len(m) for m in mats], kind="stable")
    probs = np.empty(len(mats))
    emb = np.empty((len(mats), 2 * params.meta["hidden"]))
    w = params.as_tensors()
    for start in range(0, len(mats), batch_size):
        idx = order[start:start + batch_size]
        batch = make_batch(params, [mats[i] for i in idx])
        out = forward(params.arch, w, ad.Tensor(batch.x), batch.mask)
        probs[idx] = tb_probability(out.logits.data.astype(np.float64))
        emb[idx] = out.embedding.data
    return (probs, emb) if return_embeddings else probs
