"""SentenceMamba-style encoder: word vocabulary, Mamba2 blocks, mean pooling.

The block follows the usual Mamba2 layout at a single head::

    x~ = RMSNorm(x)
    [x', z'] = W_in x~ + b_in
    v = SiLU(causal_conv(x'))
    a_t = sigmoid(w_a . v_t + b_a),  B_t = W_B^T v_t,  C_t = W_C^T v_t
    y = scan(a, B, C, v)                       # or the dense SSD form
    out = W_out (SiLU(W_g x~ + b_g) * y * SiLU(z')) + b_out + x

:class:`HyperbolicEncoder` stacks the pooled sentence vector with the
squash / norm-scale / projection pipeline from :mod:`hyperssm.geometry`.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import autograd as ag
from . import geometry as geo
from .autograd import Tensor
from .geometry import ManifoldKind

PAD, UNK = 0, 1
_WORD = re.compile(r"[^\W_]+", re.UNICODE)


# -----------------------------------------------------------------------------
# configuration
# -----------------------------------------------------------------------------


@dataclass
class EncoderConfig:
    vocab_size: int
    max_len: int = 128
    dim: int = 384
    inner: int = 768
    state: int = 96
    n_blocks: int = 4
    conv_kernel: int = 4
    dropout: float = 0.2
    ssm_mode: str = "scan"
    final_norm: bool = True

    def __post_init__(self):
        if self.inner != 2 * self.dim:
            raise ValueError(f"inner dim must be 2*dim, got {self.inner} vs {self.dim}")
        if self.ssm_mode not in ("scan", "ssd"):
            raise ValueError(f"ssm_mode must be 'scan' or 'ssd', got {self.ssm_mode!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def half(self) -> int:
        return self.inner // 2

    @classmethod
    def desk(cls, vocab_size: int, **overrides) -> "EncoderConfig":
        """Small profile that trains on one CPU core (D=64, I=128, N=16, L=32, 2 blocks)."""
        kw = dict(vocab_size=vocab_size, max_len=32, dim=64, inner=128, state=16, n_blocks=2)
        kw.update(overrides)
        return cls(**kw)


@dataclass
class ManifoldConfig:
    """Target geometry and the two geometry scalars.

    ``unit_normalize`` decides whether the pooled vector is L2-normalised
    after ``tanh`` before norm scaling. With it on, every embedding has the
    same h-norm (``gamma`` for Lorentz, ``2*gamma`` for Poincare), so depth
    cannot show up radially; it defaults to on only for Euclidean mode.
    """

    kind: ManifoldKind = ManifoldKind.POINCARE
    c: float = 1.0
    gamma: float = 0.01
    learn_curvature: bool = True
    learn_scale: bool = True
    unit_normalize: bool | None = None

    def __post_init__(self):
        self.kind = ManifoldKind(self.kind)
        if not self.c > 0:
            raise ValueError("curvature parameter c must be positive")
        if self.unit_normalize is None:
            self.unit_normalize = self.kind is ManifoldKind.EUCLIDEAN
        if self.kind is ManifoldKind.EUCLIDEAN:
            self.learn_curvature = False
            self.learn_scale = False


# -----------------------------------------------------------------------------
# vocabulary
# -----------------------------------------------------------------------------


def words(text: str) -> list[str]:
    return _WORD.findall(text.lower())


@dataclass
class Vocab:
    tokens: list[str] = field(default_factory=lambda: ["<pad>", "<unk>"])

    def __post_init__(self):
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, word: str) -> int:
        return self.index.get(word, UNK)


def build_vocab(corpus: Iterable[str], max_size: int | None = None) -> Vocab:
    """Word vocabulary, most frequent first (ties by first appearance).

    ``max_size`` caps the number of regular words; pad and unk are always
    present at ids 0 and 1.
    """
    counts: Counter[str] = Counter()
    first: dict[str, int] = {}
    n_lines = 0
    for line in corpus:
        n_lines += 1
        for w in words(line):
            counts[w] += 1
            first.setdefault(w, len(first))
    if n_lines == 0:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts, key=lambda w: (-counts[w], first[w]))
    if max_size is not None:
        ranked = ranked[:max_size]
    return Vocab(["<pad>", "<unk>", *ranked])


def tokenize(text: str, vocab: Vocab, max_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Ids padded/truncated to ``max_len`` and a mask of real tokens."""
    ids = np.full(max_len, PAD, dtype=np.int64)
    toks = [vocab.id(w) for w in words(text)][:max_len]
    ids[: len(toks)] = toks
    mask = np.zeros(max_len, dtype=bool)
    mask[: len(toks)] = True
    return ids, mask


def tokenize_batch(texts: Sequence[str], vocab: Vocab, max_len: int) -> tuple[np.ndarray, np.ndarray]:
    pairs = [tokenize(t, vocab, max_len) for t in texts]
    return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])


# -----------------------------------------------------------------------------
# parameters
# -----------------------------------------------------------------------------


def kaiming_init(shape, fan_in: int, seed_or_rng) -> Tensor:
    """He-normal weights: entries ~ N(0, 2 / fan_in)."""
    if fan_in <= 0:
        raise ValueError("fan_in must be positive")
    rng = np.random.default_rng(seed_or_rng)
    return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape), requires_grad=True)


def zeros_init(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def init_params(cfg: EncoderConfig, seed: int | np.random.Generator = 0) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    D, H, N, K = cfg.dim, cfg.half, cfg.state, cfg.conv_kernel
    p: dict[str, Tensor] = {"embed": kaiming_init((cfg.vocab_size, D), D, rng)}
    for i in range(cfg.n_blocks):
        pre = f"blocks.{i}."
        p[pre + "norm"] = Tensor(np.ones(D), requires_grad=True)
        p[pre + "in_w"] = kaiming_init((D, cfg.inner), D, rng)
        p[pre + "in_b"] = zeros_init(cfg.inner)
        p[pre + "conv"] = kaiming_init((K, H), K, rng)
        p[pre + "a_w"] = kaiming_init((H,), H, rng)
        p[pre + "a_b"] = zeros_init(())
        p[pre + "B_w"] = kaiming_init((H, N), H, rng)
        p[pre + "C_w"] = kaiming_init((H, N), H, rng)
        p[pre + "gate_w"] = kaiming_init((D, H), D, rng)
        p[pre + "gate_b"] = zeros_init(H)
        p[pre + "out_w"] = kaiming_init((H, D), H, rng)
        p[pre + "out_b"] = zeros_init(D)
    if cfg.final_norm:
        p["norm_f"] = Tensor(np.ones(D), requires_grad=True)
    for name, t in p.items():
        t.name = name
    return p


# -----------------------------------------------------------------------------
# block pieces
# -----------------------------------------------------------------------------


def _dual(fn):
    def wrapper(*args, **kwargs):
        if any(isinstance(a, Tensor) for a in (*args, *kwargs.values())):
            return fn(*args, **kwargs)
        out = fn(*args, **kwargs)
        if isinstance(out, tuple):
            return tuple(o.data for o in out)
        return out.data

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


@_dual
def rmsnorm(x, gain, eps: float = 1e-6):
    return ag.rmsnorm(x, gain, eps)


@_dual
def silu(x):
    return ag.silu(x)


@_dual
def input_project_split(x_tilde, w_in, b_in):
    """``u = x~ W_in + b_in`` split into equal halves ``(x', z')``."""
    if np.shape(ag.as_tensor(x_tilde).data)[-1] != np.shape(ag.as_tensor(w_in).data)[0]:
        raise ValueError("input width does not match W_in")
    u = ag.linear(x_tilde, w_in, b_in)
    x_p, z_p = ag.split(u, 2, axis=-1)
    return x_p, z_p


@_dual
def depthwise_conv(x, kernel):
    """Causal depthwise convolution; ``kernel[k]`` is the weight at lag ``k``."""
    return ag.depthwise_conv1d(x, kernel)


@_dual
def ssm_scan(a, B_seq, C_seq, u):
    """``h_t = a_t h_{t-1} + u_t B_t^T``, ``y_t = h_t C_t`` with ``h_0 = 0``."""
    return ag.ssm_scan(a, B_seq, C_seq, u)


MAX_DENSE_LEN = 4096


def ssd_dense(a, B_seq, C_seq, u) -> np.ndarray:
    """Dense dual form ``y = M u`` with ``M[t,s] = (prod_{s<k<=t} a_k) <C_t, B_s>``.

    Builds the decay products directly (no logarithms), so ``a = 0`` is fine.
    """
    a = np.asarray(a, dtype=float)
    B_seq, C_seq, u = (np.asarray(v, dtype=float) for v in (B_seq, C_seq, u))
    L = a.shape[-1]
    if L > MAX_DENSE_LEN:
        raise ValueError(f"sequence length {L} too large to materialise an LxL matrix")
    decay = np.zeros(a.shape[:-1] + (L, L))
    for t in range(L):
        decay[..., t, t] = 1.0
        for s in range(t - 1, -1, -1):
            decay[..., t, s] = decay[..., t, s + 1] * a[..., s + 1]
    M = decay * np.einsum("...tn,...sn->...ts", C_seq, B_seq)
    return M @ u


@_dual
def gate_residual(z, z_prime, x, x_tilde, w_g, b_g, w_out, b_out):
    """``W_out (SiLU(W_g x~ + b_g) * z * SiLU(z')) + b_out + x``."""
    gate = ag.silu(ag.linear(x_tilde, w_g, b_g))
    gated = ag.mul(ag.mul(gate, z), ag.silu(z_prime))
    return ag.add(ag.linear(gated, w_out, b_out), x)


def mamba2_block(
    x,
    params: dict[str, Tensor],
    prefix: str = "",
    mode: str = "scan",
    dropout: float = 0.0,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """One Mamba2 block on ``x`` of shape [..., L, D]."""
    p = lambda k: params[prefix + k]  # noqa: E731
    x = ag.as_tensor(x)
    xt = ag.rmsnorm(x, p("norm"))
    x_p, z_p = ag.split(ag.linear(xt, p("in_w"), p("in_b")), 2, axis=-1)
    v = ag.silu(ag.depthwise_conv1d(x_p, p("conv")))
    a_logit = ag.add(ag.matmul(v, p("a_w")), p("a_b"))
    Bm = ag.matmul(v, p("B_w"))
    Cm = ag.matmul(v, p("C_w"))
    if mode == "ssd":
        y = ag.ssd(ag.log_sigmoid(a_logit), Bm, Cm, v)
    else:
        y = ag.ssm_scan(ag.sigmoid(a_logit), Bm, Cm, v)
    out = gate_residual(y, z_p, x, xt, p("gate_w"), p("gate_b"), p("out_w"), p("out_b"))
    return ag.dropout(out, dropout, rng, train)


# -----------------------------------------------------------------------------
# encoder
# -----------------------------------------------------------------------------


class SentenceEncoder:
    """Token ids -> mean-pooled sentence vector."""

    def __init__(self, config: EncoderConfig, vocab: Vocab, seed: int = 0, params=None):
        if config.vocab_size != len(vocab):
            raise ValueError("config.vocab_size does not match the vocabulary")
        self.config = config
        self.vocab = vocab
        self.params: dict[str, Tensor] = params if params is not None else init_params(config, seed)

    def tokenize(self, texts: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
        return tokenize_batch(texts, self.vocab, self.config.max_len)

    def forward(self, ids: np.ndarray, mask: np.ndarray, train: bool = False, rng=None) -> Tensor:
        ids, mask = np.atleast_2d(ids), np.atleast_2d(mask)
        lengths = mask.sum(axis=-1)
        if np.any(lengths == 0):
            raise ValueError("cannot encode an all-padding sequence")
        # padding is trailing and every op is causal, so trim it off
        ids = ids[:, : int(lengths.max())]
        cfg = self.config
        x = ag.take(self.params["embed"], ids)
        for i in range(cfg.n_blocks):
            x = mamba2_block(
                x, self.params, f"blocks.{i}.", cfg.ssm_mode, cfg.dropout, train, rng
            )
        if cfg.final_norm:
            x = rmsnorm(x, self.params["norm_f"])
        return ag.masked_mean(x, lengths)

    def encode_texts(self, texts: Sequence[str]) -> np.ndarray:
        ids, mask = self.tokenize(texts)
        return self.forward(ids, mask).data


def encode(ids: np.ndarray, mask: np.ndarray, model: SentenceEncoder, train: bool = False, rng=None):
    """Pooled vector(s) ``s``; returns [D] for a single sequence, [B, D] for a batch."""
    single = np.ndim(ids) == 1
    out = model.forward(ids, mask, train, rng)
    return out[0] if single else out


class HyperbolicEncoder:
    """Sentence encoder followed by the projection onto a manifold."""

    def __init__(self, encoder: SentenceEncoder, manifold: ManifoldConfig):
        self.encoder = encoder
        self.manifold = manifold
        self.curvature = Tensor(np.array(manifold.c), requires_grad=manifold.learn_curvature, name="curvature")
        self.scale = Tensor(np.array(manifold.gamma), requires_grad=manifold.learn_scale, name="scale")

    @property
    def kind(self) -> ManifoldKind:
        return self.manifold.kind

    @property
    def c(self) -> float:
        return float(self.curvature.data)

    @property
    def gamma(self) -> float:
        return float(self.scale.data)

    def parameters(self) -> dict[str, Tensor]:
        p = dict(self.encoder.params)
        p["curvature"] = self.curvature
        p["scale"] = self.scale
        return p

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.parameters().items() if v.requires_grad}

    def project_pooled(self, s) -> Tensor:
        """Pooled vectors -> manifold points (Euclidean: unit vectors)."""
        kind = self.kind
        if self.manifold.unit_normalize:
            u, _ = geo.squash_normalize(ag.as_tensor(s))
        else:
            u = ag.tanh(s)
        if kind is ManifoldKind.EUCLIDEAN:
            return u
        h = geo.norm_scale(u, self.scale, kind)
        return geo.project(h, self.curvature, kind)

    def embed(self, ids, mask, train: bool = False, rng=None) -> Tensor:
        return self.project_pooled(self.encoder.forward(ids, mask, train, rng))

    def embed_texts(self, texts: Sequence[str], batch_size: int = 256) -> np.ndarray:
        outs = []
        for i in range(0, len(texts), batch_size):
            ids, mask = self.encoder.tokenize(texts[i : i + batch_size])
            outs.append(self.embed(ids, mask).data)
        return np.concatenate(outs, axis=0)

    def distance(self, x, y):
        return geo.distance(x, y, self.curvature if isinstance(x, Tensor) else self.c, self.kind)

    def h_norm(self, e):
        return geo.h_norm(e, self.curvature if isinstance(e, Tensor) else self.c, self.kind)

    def config_dict(self) -> dict:
        return {
            "encoder": asdict(self.encoder.config),
            "manifold": {**asdict(self.manifold), "kind": self.kind.value},
        }
