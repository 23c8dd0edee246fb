"""Paired-stream causal transformer with per-step estimation heads.

Two token streams of length T run through the network side by side: a
treatment stream and a feature stream. Position ``j`` of the feature stream
carries the covariates observed just before treatment ``j``; position ``j``
of the treatment stream carries the treatment received at step ``j - 1``,
with a learned start token at position 0. Under the causal attention mask,
the hidden state at position ``j`` therefore summarizes exactly the history
a step-``j`` decision may depend on, and the three heads read it to produce
the step-``j`` propensity, conditional outcome mean, and per-arm blip
components (the control arm is fixed at zero and never emitted).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Tensor
from .snmm import Panel

__all__ = [
    "ArchConfig",
    "ModelOutputs",
    "TerraModel",
    "pos_encode",
    "positional_encoding",
    "masked_multihead",
    "causal_mask",
    "attention_flops_per_layer",
]

LN_EPS = 1e-5
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ArchConfig:
    """Architecture hyperparameters.

    ``p`` is the covariate dimension, ``n_treatments`` the number of
    treatment levels including control, ``horizon`` the number of steps T.
    """

    d_model: int = 32
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 64
    dropout_p: float = 0.1
    p: int = 5
    n_treatments: int = 2
    horizon: int = 5

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if min(self.d_model, self.n_heads, self.n_layers, self.d_ff,
               self.p, self.horizon) < 1:
            raise ValueError("architecture dimensions must be positive")
        if self.n_treatments < 2:
            raise ValueError("need at least two treatment levels")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must be in [0, 1)")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def param_count(self) -> int:
        """Closed-form total parameter count.

        Encoders embed one-hot treatments (|Z| levels plus the start token)
        and raw covariates into d. Each layer holds, per stream: self- and
        cross-attention (4 d^2 weights each), a width-d_ff feed-forward, and
        three layer norms. Each head is one hidden layer of width d over the
        concatenated 2d trunk.
        """
        d, dff, k, layers = self.d_model, self.d_ff, self.n_treatments, self.n_layers
        enc = (k + 1) * d + d + self.p * d + d
        per_stream = 8 * d * d + 2 * d * dff + dff + 7 * d
        head_outputs = k + 1 + (k - 1)
        heads = 3 * (2 * d * d + d) + (d + 1) * head_outputs
        return enc + layers * 2 * per_stream + heads


@dataclass
class ModelOutputs:
    """Per-(unit, step) head outputs.

    propensity: [B, T, |Z|] simplex rows.
    propensity_logits: [B, T, |Z|] pre-softmax scores (for stable training).
    cond_mean: [B, T] conditional outcome-mean estimates.
    blip: [B, T, |Z|-1] blip components for the non-control arms.
    params: the leaf tensors of this forward pass, keyed by parameter name
        (present only when the pass was recorded on a graph).
    """

    propensity: Tensor
    propensity_logits: Tensor
    cond_mean: Tensor
    blip: Tensor
    params: dict[str, Tensor] | None = None


def pos_encode(t: int, k: int, d_model: int) -> float:
    """Sinusoidal channel value for 1-based position t, 0-based channel k."""
    if not 0 <= k < d_model:
        raise ValueError("channel index out of range")
    angle = t * 10000.0 ** (-k / d_model)
    return math.sin(angle) if k % 2 == 0 else math.cos(angle)


def positional_encoding(length: int, d_model: int) -> np.ndarray:
    """[length, d_model] matrix; row i encodes position i+1."""
    k = np.arange(d_model)
    t = np.arange(1, length + 1, dtype=np.float64)[:, None]
    angle = t * 10000.0 ** (-k / d_model)
    return np.where(k % 2 == 0, np.sin(angle), np.cos(angle))


def causal_mask(length: int) -> np.ndarray:
    """Boolean [length, length]; True where key position <= query position."""
    return np.tril(np.ones((length, length), dtype=bool))


def masked_multihead(query, key, value, wq, wk, wv, wo, n_heads: int,
                     allowed: np.ndarray, dropout_p: float = 0.0, rng=None,
                     training: bool = False, return_weights: bool = False):
    """Masked scaled dot-product attention with parallel heads.

    ``wq``/``wk``/``wv`` are [d_model, n_heads * d_head] with head i's
    projection occupying columns [i*d_head, (i+1)*d_head); ``wo`` is the
    output projection applied to the concatenated heads. ``allowed`` is the
    boolean mask; excluded positions get exactly zero attention weight.
    """
    d_head = wq.shape[-1] // n_heads
    inv_sqrt = 1.0 / math.sqrt(d_head)
    q_all = ad.matmul(query, wq)
    k_all = ad.matmul(key, wk)
    v_all = ad.matmul(value, wv)
    heads = []
    weights = []
    for i in range(n_heads):
        lo, hi = i * d_head, (i + 1) * d_head
        scores = ad.scale(ad.matmul(ad.slice_last(q_all, lo, hi),
                                    ad.transpose(ad.slice_last(k_all, lo, hi))),
                          inv_sqrt)
        attn = ad.softmax_rows(ad.masked_fill(scores, allowed))
        heads.append(ad.matmul(attn, ad.slice_last(v_all, lo, hi)))
        if return_weights:
            weights.append(attn)
    out = ad.matmul(ad.concat_last(heads), wo)
    out = ad.dropout(out, dropout_p, rng, training)
    if return_weights:
        return out, weights
    return out


def attention_flops_per_layer(horizon: int, d_model: int, d_ff: int) -> dict:
    """Cost model for one stream of one layer, in 2*MAC flop counts.

    Each of the two attention sublayers (self and cross) spends
    4 T^2 d_model on the score and mixing products (the part that scales
    quadratically in the horizon) plus 8 T d_model^2 on the Q/K/V/output
    projections; the feed-forward block adds 4 T d_model d_ff. Per batch
    row the whole trunk therefore costs
    O(n_layers * (T^2 d_model + T d_model^2)).
    """
    attn_quadratic = 2 * 4 * horizon * horizon * d_model
    projections = 2 * 8 * horizon * d_model * d_model
    feed_forward = 4 * horizon * d_model * d_ff
    return {
        "attention_quadratic": float(attn_quadratic),
        "projections": float(projections),
        "feed_forward": float(feed_forward),
        "total": float(attn_quadratic + projections + feed_forward),
    }


class TerraModel:
    """The two-stream causal transformer plus its numpy parameter store."""

    def __init__(self, config: ArchConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, np.ndarray] = {}
        self._init_params(np.random.default_rng(np.random.SeedSequence([seed])))

    # --- parameters -------------------------------------------------------

    def _linear(self, rng, name: str, fan_in: int, shape: tuple) -> None:
        bound = 1.0 / math.sqrt(fan_in)
        self.params[name] = rng.uniform(-bound, bound, size=shape)

    def _init_params(self, rng) -> None:
        cfg = self.config
        d, dk, dff = cfg.d_model, cfg.d_head, cfg.d_ff
        k, p = cfg.n_treatments, cfg.p
        self._linear(rng, "enc_z.w", k + 1, (k + 1, d))
        self._linear(rng, "enc_z.b", k + 1, (d,))
        self._linear(rng, "enc_x.w", p, (p, d))
        self._linear(rng, "enc_x.b", p, (d,))
        for layer in range(cfg.n_layers):
            for stream in ("treat", "feat"):
                base = f"block{layer}.{stream}"
                for attn in ("self", "cross"):
                    for w in ("wq", "wk", "wv"):
                        self._linear(rng, f"{base}.{attn}.{w}", d,
                                     (d, cfg.n_heads * dk))
                    self._linear(rng, f"{base}.{attn}.wo", d, (d, d))
                self._linear(rng, f"{base}.ff.w1", d, (d, dff))
                self._linear(rng, f"{base}.ff.b1", d, (dff,))
                self._linear(rng, f"{base}.ff.w2", dff, (dff, d))
                self._linear(rng, f"{base}.ff.b2", dff, (d,))
                for ln in ("self_ln", "cross_ln", "ff_ln"):
                    self.params[f"{base}.{ln}.g"] = np.ones(d)
                    self.params[f"{base}.{ln}.b"] = np.zeros(d)
        head_out = {"prop": k, "mu": 1, "blip": k - 1}
        for name, out in head_out.items():
            self._linear(rng, f"head_{name}.w1", 2 * d, (2 * d, d))
            self._linear(rng, f"head_{name}.b1", 2 * d, (d,))
            self._linear(rng, f"head_{name}.w2", d, (d, out))
            self._linear(rng, f"head_{name}.b2", d, (out,))

    def n_parameters(self) -> int:
        return sum(v.size for v in self.params.values())

    # --- forward ----------------------------------------------------------

    def _wrap_params(self, graph: Graph | None) -> dict[str, Tensor]:
        if graph is None:
            return {k: Tensor(v) for k, v in self.params.items()}
        return {k: graph.leaf(v) for k, v in self.params.items()}

    def _input_tokens(self, z: np.ndarray) -> np.ndarray:
        """Shift treatments right by one; position 0 is the start token."""
        b, t = z.shape
        tokens = np.full((b, t), self.config.n_treatments, dtype=np.int64)
        tokens[:, 1:] = z[:, :t - 1]
        return tokens

    def encode_sequences(self, tokens: np.ndarray, x: np.ndarray,
                         params: dict[str, Tensor] | None = None,
                         ) -> tuple[Tensor, Tensor]:
        """Per-step linear embeddings plus positional encoding.

        ``tokens`` are treatment-stream token indices [B, T] (values in
        0..|Z|, where |Z| marks the start token); ``x`` is [B, T, p].
        """
        pr = self._wrap_params(None) if params is None else params
        t_len = tokens.shape[1]
        pe = Tensor(positional_encoding(t_len, self.config.d_model))
        temb = ad.add(ad.add(ad.embedding(pr["enc_z.w"], tokens), pr["enc_z.b"]), pe)
        femb = ad.add(ad.add(ad.matmul(Tensor(x), pr["enc_x.w"]), pr["enc_x.b"]), pe)
        return temb, femb

    def _sublayer(self, x: Tensor, sub_out: Tensor, gamma: Tensor,
                  beta: Tensor) -> Tensor:
        return ad.layer_norm(ad.add(sub_out, x), gamma, beta, LN_EPS)

    def _feed_forward(self, x: Tensor, pr: dict, base: str, rng, training) -> Tensor:
        h = ad.relu(ad.add(ad.matmul(x, pr[f"{base}.ff.w1"]), pr[f"{base}.ff.b1"]))
        out = ad.add(ad.matmul(h, pr[f"{base}.ff.w2"]), pr[f"{base}.ff.b2"])
        return ad.dropout(out, self.config.dropout_p, rng, training)

    def transformer_block(self, treat_emb: Tensor, feat_emb: Tensor, layer: int,
                          params: dict[str, Tensor] | None = None,
                          allowed: np.ndarray | None = None,
                          rng=None, training: bool = False,
                          ) -> tuple[Tensor, Tensor]:
        """One block: masked self-attention per stream, masked cross-attention
        coupling the streams (treatment queries features and vice versa), and
        a position-wise feed-forward, each wrapped residual-then-layernorm."""
        pr = self._wrap_params(None) if params is None else params
        if allowed is None:
            allowed = causal_mask(treat_emb.shape[1])
        p_drop = self.config.dropout_p
        out = {}
        for stream, emb in (("treat", treat_emb), ("feat", feat_emb)):
            base = f"block{layer}.{stream}"
            attn = masked_multihead(
                emb, emb, emb,
                pr[f"{base}.self.wq"], pr[f"{base}.self.wk"],
                pr[f"{base}.self.wv"], pr[f"{base}.self.wo"],
                self.config.n_heads, allowed, p_drop, rng, training)
            out[stream] = self._sublayer(emb, attn,
                                         pr[f"{base}.self_ln.g"],
                                         pr[f"{base}.self_ln.b"])
        crossed = {}
        for stream, other in (("treat", "feat"), ("feat", "treat")):
            base = f"block{layer}.{stream}"
            attn = masked_multihead(
                out[stream], out[other], out[other],
                pr[f"{base}.cross.wq"], pr[f"{base}.cross.wk"],
                pr[f"{base}.cross.wv"], pr[f"{base}.cross.wo"],
                self.config.n_heads, allowed, p_drop, rng, training)
            crossed[stream] = self._sublayer(out[stream], attn,
                                             pr[f"{base}.cross_ln.g"],
                                             pr[f"{base}.cross_ln.b"])
        final = {}
        for stream in ("treat", "feat"):
            base = f"block{layer}.{stream}"
            ff = self._feed_forward(crossed[stream], pr, base, rng, training)
            final[stream] = self._sublayer(crossed[stream], ff,
                                           pr[f"{base}.ff_ln.g"],
                                           pr[f"{base}.ff_ln.b"])
        return final["treat"], final["feat"]

    def _head(self, trunk: Tensor, pr: dict, name: str) -> Tensor:
        h = ad.relu(ad.add(ad.matmul(trunk, pr[f"head_{name}.w1"]),
                           pr[f"head_{name}.b1"]))
        return ad.add(ad.matmul(h, pr[f"head_{name}.w2"]), pr[f"head_{name}.b2"])

    def forward(self, z: np.ndarray, x: np.ndarray, graph: Graph | None = None,
                training: bool = False, rng=None) -> ModelOutputs:
        """Run the full network on a batch.

        ``z`` is [B, T] integer treatments and ``x`` is [B, T, p]. Only
        ``z[:, :T-1]`` enters the input (shifted behind the start token); the
        step-j heads read position j and therefore condition on covariates
        through step j and treatments strictly before it.
        """
        z = np.asarray(z, dtype=np.int64)
        x = np.asarray(x, dtype=np.float64)
        pr = self._wrap_params(graph)
        temb, femb = self.encode_sequences(self._input_tokens(z), x, pr)
        allowed = causal_mask(z.shape[1])
        for layer in range(self.config.n_layers):
            temb, femb = self.transformer_block(
                temb, femb, layer, pr, allowed, rng, training)
        trunk = ad.concat_last([temb, femb])
        logits = self._head(trunk, pr, "prop")
        mu = ad.sum_axis(self._head(trunk, pr, "mu"), axis=-1)
        blip = self._head(trunk, pr, "blip")
        return ModelOutputs(
            propensity=ad.softmax_rows(logits),
            propensity_logits=logits,
            cond_mean=mu,
            blip=blip,
            params=pr if graph is not None else None,
        )

    # --- evaluation conveniences -------------------------------------------

    def predict_blip_components(self, panel: Panel,
                                chunk_size: int = 4096) -> np.ndarray:
        """[N, T, |Z|-1] blip components at realized histories, eval mode."""
        outputs = []
        for start in range(0, panel.n_units, chunk_size):
            sl = slice(start, start + chunk_size)
            out = self.forward(panel.z[sl], panel.x[sl])
            outputs.append(out.blip.data)
        return np.concatenate(outputs, axis=0)

    # --- checkpointing ------------------------------------------------------

    def save(self, path: str | Path) -> None:
        """Write a flat npz of named parameter arrays plus a JSON meta entry."""
        meta = json.dumps({"format_version": CHECKPOINT_VERSION,
                           "config": asdict(self.config)}, sort_keys=True)
        np.savez(path, __meta__=np.array(meta), **self.params)

    @classmethod
    def load(cls, path: str | Path) -> "TerraModel":
        with np.load(path) as data:
            meta = json.loads(str(data["__meta__"]))
            if meta["format_version"] != CHECKPOINT_VERSION:
                raise ValueError(
                    f"unsupported checkpoint version {meta['format_version']}")
            model = cls(ArchConfig(**meta["config"]), seed=0)
            names = [k for k in data.files if k != "__meta__"]
            if set(names) != set(model.params):
                raise ValueError("checkpoint parameter names do not match")
            for name in names:
                if data[name].shape != model.params[name].shape:
                    raise ValueError(f"shape mismatch for parameter {name}")
                model.params[name] = data[name].astype(np.float64)
        return model
