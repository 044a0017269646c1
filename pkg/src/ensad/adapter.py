"""The ensemble adapter: additive attention over translation embeddings,
fused into the source embedding through a gated residual.

Forward and backward run in the kernels module (row-major internally); this
module owns parameter containers, validation, initialization, counting, the
non-learned fusion baselines, and the attention-score export schema.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .numkit import SeededRng, as_f64, l2_normalize

STRATEGIES = ("ensad", "zero_shot", "translate_test", "mean_pool")


@dataclass(frozen=True)
class EnsAdConfig:
    d: int = 512
    d_hid: int = 256
    m: int = 12
    alpha: float = 0.2
    variant_v_equals_k: bool = False

    def __post_init__(self):
        if self.d < 1 or self.d_hid < 1 or self.m < 1:
            raise ValueError("d, d_hid and m must be positive")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")


@dataclass
class EnsAdParams:
    """Learnable tensors. ``wp`` is the single score-projection row and
    ``bp`` its scalar bias, kept as a 0-d array so the optimizer can update
    it in place like every other tensor."""

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    b: np.ndarray
    wp: np.ndarray
    bp: np.ndarray
    wo: np.ndarray

    def tensor_items(self) -> list[tuple[str, np.ndarray]]:
        return [
            ("wq", self.wq),
            ("wk", self.wk),
            ("wv", self.wv),
            ("b", self.b),
            ("wp", self.wp),
            ("bp", self.bp),
            ("wo", self.wo),
        ]

    def copy(self) -> "EnsAdParams":
        return EnsAdParams(*(arr.copy() for _, arr in self.tensor_items()))

    def to_jsonable(self) -> dict:
        return {
            "wq": self.wq.tolist(),
            "wk": self.wk.tolist(),
            "wv": self.wv.tolist(),
            "b": self.b.tolist(),
            "wp": self.wp.tolist(),
            "bp": float(self.bp),
            "wo": self.wo.tolist(),
        }

    @staticmethod
    def from_jsonable(obj: dict, cfg: EnsAdConfig) -> "EnsAdParams":
        p = EnsAdParams(
            wq=np.asarray(obj["wq"], dtype=np.float64),
            wk=np.asarray(obj["wk"], dtype=np.float64),
            wv=np.asarray(obj["wv"], dtype=np.float64),
            b=np.asarray(obj["b"], dtype=np.float64),
            wp=np.asarray(obj["wp"], dtype=np.float64),
            bp=np.asarray(obj["bp"], dtype=np.float64),
            wo=np.asarray(obj["wo"], dtype=np.float64),
        )
        validate_params(p, cfg)
        return p


def validate_params(p: EnsAdParams, cfg: EnsAdConfig) -> None:
    shapes = {
        "wq": (cfg.d_hid, cfg.d),
        "wk": (cfg.d_hid, cfg.d),
        "wv": (cfg.d_hid, cfg.d),
        "b": (cfg.d_hid,),
        "wp": (cfg.d_hid,),
        "bp": (),
        "wo": (cfg.d, cfg.d),
    }
    for name, arr in p.tensor_items():
        if arr.shape != shapes[name]:
            raise ValueError(f"{name} has shape {arr.shape}, expected {shapes[name]}")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"{name} contains non-finite entries")


def init_params(cfg: EnsAdConfig, rng: SeededRng) -> EnsAdParams:
    """Weights i.i.d. N(0, 1/fan_in), biases zero.

    Draw order (frozen for reproducibility): wq, wk, wv, wp, wo, each
    row-major.
    """
    d, dh = cfg.d, cfg.d_hid

    def draw(rows, cols, fan_in):
        flat = rng.gaussian(rows * cols) / np.sqrt(fan_in)
        return flat.reshape(rows, cols)

    wq = draw(dh, d, d)
    wk = draw(dh, d, d)
    wv = draw(dh, d, d)
    wp = rng.gaussian(dh) / np.sqrt(dh)
    wo = draw(d, d, d)
    return EnsAdParams(
        wq=wq,
        wk=wk,
        wv=wv,
        b=np.zeros(dh),
        wp=wp,
        bp=np.zeros(()),
        wo=wo,
    )


def param_count(cfg: EnsAdConfig) -> int:
    """Total scalar count: three query/key/value maps, two hidden-width
    bias/projection vectors, one scalar score bias, one d x d output map."""
    return 3 * cfg.d_hid * cfg.d + 2 * cfg.d_hid + 1 + cfg.d * cfg.d


@dataclass
class ForwardTrace:
    """Every intermediate of one forward pass, row-major: ``*_rows`` arrays
    hold one translation per row (shape (m, d) or (m, d_hid)).

    Pre/post-normalization pairs: (vraw_rows, v_rows), (u_rows, uhat_rows),
    (craw, c), (hraw, h_tilde); a_rows/t_rows are the attention preactivation
    and its tanh; logits/s the scores before and after softmax.
    """

    h_rows: np.ndarray
    q: np.ndarray
    k_rows: np.ndarray
    vraw_rows: np.ndarray
    vraw_norms: np.ndarray
    v_rows: np.ndarray
    a_rows: np.ndarray
    t_rows: np.ndarray
    logits: np.ndarray
    s: np.ndarray
    u_rows: np.ndarray
    u_norms: np.ndarray
    uhat_rows: np.ndarray
    vo_rows: np.ndarray
    craw: np.ndarray
    craw_norm: float
    c: np.ndarray
    hraw: np.ndarray
    hraw_norm: float
    h_tilde: np.ndarray


def forward(
    p: EnsAdParams, cfg: EnsAdConfig, h_matrix: np.ndarray
) -> tuple[np.ndarray, ForwardTrace]:
    """Run the adapter on one ensemble.

    ``h_matrix`` is (d, m+1): column 0 the source embedding, columns 1..m
    the translations, all unit-norm or zero. Returns the fused unit vector
    and the full trace. With alpha == 0, or when the attention context
    vanishes, the source column is returned bit-exactly.
    """
    h = as_f64(h_matrix, "ensemble matrix")
    if h.ndim != 2 or h.shape != (cfg.d, cfg.m + 1):
        raise ValueError(
            f"ensemble matrix has shape {h.shape}, expected {(cfg.d, cfg.m + 1)}"
        )
    validate_params(p, cfg)
    h_rows = np.ascontiguousarray(h.T)
    out = kernels.adapter_forward(
        h_rows,
        p.wq,
        p.wk,
        p.wv,
        p.b,
        p.wp,
        float(p.bp),
        p.wo,
        cfg.alpha,
        cfg.variant_v_equals_k,
    )
    (
        q, k_rows, vraw_rows, vraw_norms, v_rows, a_rows, t_rows, logits, s,
        u_rows, u_norms, uhat_rows, vo_rows, craw, craw_norm, c, hraw,
        hraw_norm, h_tilde,
    ) = out
    trace = ForwardTrace(
        h_rows=h_rows,
        q=q,
        k_rows=k_rows,
        vraw_rows=vraw_rows,
        vraw_norms=vraw_norms,
        v_rows=v_rows,
        a_rows=a_rows,
        t_rows=t_rows,
        logits=logits,
        s=s,
        u_rows=u_rows,
        u_norms=u_norms,
        uhat_rows=uhat_rows,
        vo_rows=vo_rows,
        craw=craw,
        craw_norm=float(craw_norm),
        c=c,
        hraw=hraw,
        hraw_norm=float(hraw_norm),
        h_tilde=h_tilde,
    )
    return h_tilde, trace


def attention_scores(trace: ForwardTrace) -> np.ndarray:
    """The softmax attention weights over translations, summing to 1."""
    return trace.s.copy()


def backward(
    p: EnsAdParams,
    cfg: EnsAdConfig,
    trace: ForwardTrace,
    grad_h_tilde: np.ndarray,
) -> tuple[EnsAdParams, np.ndarray]:
    """Exact reverse-mode gradients of the forward pass.

    Returns (parameter gradients in an EnsAdParams-shaped container,
    gradient w.r.t. the (d, m+1) input matrix). Normalizations that hit the
    zero-vector branch in the forward contribute zero Jacobian.
    """
    g = as_f64(grad_h_tilde, "grad_h_tilde")
    if g.shape != (cfg.d,):
        raise ValueError(f"grad_h_tilde has shape {g.shape}, expected {(cfg.d,)}")
    out = kernels.adapter_backward(
        g,
        p.wq,
        p.wk,
        p.wv,
        p.wp,
        p.wo,
        cfg.alpha,
        cfg.variant_v_equals_k,
        trace.q,
        trace.k_rows,
        trace.vraw_norms,
        trace.v_rows,
        trace.t_rows,
        trace.s,
        trace.u_rows,
        trace.u_norms,
        trace.uhat_rows,
        trace.vo_rows,
        trace.c,
        trace.craw_norm,
        trace.h_tilde,
        trace.hraw_norm,
    )
    grad_wq, grad_wk, grad_wv, grad_b, grad_wp, grad_bp, grad_wo, g_h_rows = out
    grads = EnsAdParams(
        wq=grad_wq,
        wk=grad_wk,
        wv=grad_wv,
        b=grad_b,
        wp=grad_wp,
        bp=np.asarray(grad_bp, dtype=np.float64),
        wo=grad_wo,
    )
    for name, arr in grads.tensor_items():
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite gradient in {name}")
    grad_h = np.ascontiguousarray(g_h_rows.T)
    if not np.all(np.isfinite(grad_h)):
        raise ValueError("non-finite gradient w.r.t. the input matrix")
    return grads, grad_h


def fuse_mean_pool(h_matrix: np.ndarray) -> np.ndarray:
    """Unit-normalized columnwise mean of all m+1 embeddings."""
    h = as_f64(h_matrix, "ensemble matrix")
    if h.ndim != 2:
        raise ValueError("ensemble matrix must be 2-D")
    return l2_normalize(h.mean(axis=1))


def fuse_select(h_matrix: np.ndarray, index: int) -> np.ndarray:
    """Column ``index`` unchanged: 0 is the source embedding (zero-shot
    conditioning), 1 the first translation (translate-test)."""
    h = as_f64(h_matrix, "ensemble matrix")
    if h.ndim != 2:
        raise ValueError("ensemble matrix must be 2-D")
    if not 0 <= index < h.shape[1]:
        raise IndexError(f"column {index} out of range for {h.shape[1]} columns")
    return h[:, index].copy()


def attention_export_record(
    item_id: str,
    scores: np.ndarray,
    translation_texts: tuple[str, ...] | None = None,
) -> dict:
    """One export line: scores sorted descending, texts reordered to match."""
    s = as_f64(scores, "scores")
    order = np.argsort(-s, kind="stable")
    record: dict = {"id": item_id, "scores": [float(s[i]) for i in order]}
    if translation_texts is not None:
        if len(translation_texts) != s.shape[0]:
            raise ValueError("translation_texts length does not match scores")
        record["translation_texts"] = [translation_texts[i] for i in order]
    return record
