"""Two-stream autoregressive transformer over duplicate-encoded token trees.

The context stream ``h`` lets position ``t`` attend to its ancestors and itself;
the query stream ``g`` attends to the ancestors only and is the one that predicts
``s_t``.  Positions share an embedding per tree layer, the root label is added
to the initial query, and the output projection is tied to the token table.

Two layouts of the same model exist: ``full_sequence`` runs the whole BFS
sequence of ``T`` tokens with a dense masked ``T x T`` attention, and
``cost_efficient`` runs every root-to-leaf path of ``L + 1`` tokens with a plain
causal mask.  Given identical parameters both give the same conditionals.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .encoding import TreeShape
from .privacy import DpSgdConfig, clip_and_noise
from .quantizer import TokenSet
from .rng import generator

logger = logging.getLogger(__name__)

CKPT_MAGIC = b"CGT1"
CKPT_VERSION = 1
VARIANTS = ("full_sequence", "cost_efficient")


class TrainingDivergedError(FloatingPointError):
    def __init__(self, step: int, trace: list):
        super().__init__(f"loss became non-finite at step {step}")
        self.step = step
        self.trace = trace


@dataclass
class CgtConfig:
    vocab: int
    labels: int
    s: int
    L: int
    dim: int = 128
    heads: int = 4
    layers: int = 3
    variant: str = "full_sequence"
    use_label: bool = True
    use_layer_positions: bool = True
    use_ancestor_mask: bool = True
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError("dim must be divisible by heads")
        if self.layers < 1:
            raise ValueError("need at least one layer")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.vocab < 2 or self.labels < 1:
            raise ValueError("vocab must be >= 2 and labels >= 1")

    @property
    def shape(self) -> TreeShape:
        return TreeShape(self.s, self.L)

    @property
    def null_token(self) -> int:
        return self.vocab - 1

    @property
    def num_positions(self) -> int:
        return self.L + 1 if self.use_layer_positions else self.shape.T


def param_shapes(cfg: CgtConfig) -> dict[str, tuple]:
    """Parameter names and shapes in declaration (checkpoint) order."""
    d, h = cfg.dim, cfg.dim * cfg.mlp_ratio
    shapes = {
        "token_embeddings": (cfg.vocab, d),
        "position_embeddings": (cfg.num_positions, d),
        "label_embeddings": (cfg.labels, d),
        "initial_query": (d,),
    }
    for i in range(cfg.layers):
        shapes.update({
            f"l{i}.ln1_g": (d,), f"l{i}.ln1_b": (d,),
            f"l{i}.wq": (d, d), f"l{i}.wk": (d, d), f"l{i}.wv": (d, d),
            f"l{i}.wo": (d, d), f"l{i}.bo": (d,),
            f"l{i}.ln2_g": (d,), f"l{i}.ln2_b": (d,),
            f"l{i}.w1": (d, h), f"l{i}.b1": (h,), f"l{i}.w2": (h, d), f"l{i}.b2": (d,),
        })
    shapes["lnf_g"] = (d,)
    shapes["lnf_b"] = (d,)
    return shapes


def init_params(cfg: CgtConfig, seed: int, dtype=np.float32) -> dict[str, np.ndarray]:
    rng = generator(seed, "cgt-init")
    params = {}
    for name, shp in param_shapes(cfg).items():
        leaf = name.split(".")[-1]
        if name.endswith("embeddings") or name == "initial_query":
            arr = rng.normal(0.0, 0.02, size=shp)
        elif leaf.endswith("_g"):
            arr = np.ones(shp)
        elif leaf.startswith("b") or leaf.endswith("_b"):
            arr = np.zeros(shp)
        else:
            bound = 1.0 / math.sqrt(shp[0])
            arr = rng.uniform(-bound, bound, size=shp)
        params[name] = arr.astype(dtype)
    return params


@dataclass
class Layout:
    """How token sequences are laid out for one forward pass."""

    positions: np.ndarray  # (S,) or (B, S) position-table indices
    ctx_mask: np.ndarray   # (S, S) True where attention is allowed
    query_mask: np.ndarray
    loss_weights: np.ndarray | None = None  # (B, S) or None


def _causal(S: int):
    strict = np.tril(np.ones((S, S), dtype=bool), -1)
    return strict | np.eye(S, dtype=bool), strict


def full_layout(cfg: CgtConfig, ancestor_mask: bool | None = None) -> Layout:
    shape = cfg.shape
    use_anc = cfg.use_ancestor_mask if ancestor_mask is None else ancestor_mask
    if use_anc:
        anc = shape.ancestor_matrix
        ctx, query = anc | np.eye(shape.T, dtype=bool), anc
    else:
        ctx, query = _causal(shape.T)
    pos = shape.layers if cfg.use_layer_positions else np.arange(shape.T)
    return Layout(pos, ctx, query)


def path_layout(cfg: CgtConfig, n_trees: int) -> Layout:
    shape = cfg.shape
    ctx, query = _causal(cfg.L + 1)
    if cfg.use_layer_positions:
        pos = np.arange(cfg.L + 1)
    else:
        pos = np.tile(shape.path_table, (n_trees, 1))
    weights = np.tile(shape.path_first_visit, (n_trees, 1)).astype(np.float64)
    return Layout(pos, ctx, query, weights)


def to_paths(tokens: np.ndarray, cfg: CgtConfig, labels: np.ndarray):
    """(N, T) trees -> (N * s^L, L + 1) path sequences with repeated labels."""
    table = cfg.shape.path_table
    paths = tokens[:, table].reshape(-1, cfg.L + 1)
    return paths, np.repeat(labels, table.shape[0])


def _attention(q, k, v, mask, heads, stats):
    B, S, D = q.shape
    dh = D // heads

    def split(x):
        return ad.transpose(ad.reshape(x, (B, S, heads, dh)), (0, 2, 1, 3))

    qh, kh, vh = split(q), split(k), split(v)
    scores = ad.mul(ad.matmul(qh, ad.transpose(kh, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    att = ad.masked_softmax(scores, mask)
    out = ad.matmul(att, vh)
    if stats is not None:
        # multiply-adds of QK^T and AV
        stats["attention_flops"] = stats.get("attention_flops", 0) + 2 * 2 * B * heads * S * S * dh
    return ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (B, S, D))


def forward(params: dict, cfg: CgtConfig, tokens, labels, layout: Layout | None = None,
            stats: dict | None = None, return_inputs: bool = False):
    """Logits ``(B, S, vocab)`` for every position of every sequence.

    ``params`` may hold numpy arrays or :class:`autodiff.Tensor` leaves.  With
    ``return_inputs`` the per-position token-embedding inputs are also returned
    so callers can differentiate with respect to ``e(s_t')`` directly.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None]
    if labels.ndim == 0:
        labels = labels[None]
    B, S = tokens.shape
    if layout is None:
        if S == cfg.shape.T:
            layout = full_layout(cfg)
        elif S == cfg.L + 1 and cfg.use_layer_positions:
            layout = path_layout(cfg, 1)
        else:
            raise ValueError(f"sequence length {S} needs an explicit layout (T={cfg.shape.T})")
    if layout.ctx_mask.shape != (S, S):
        raise ValueError("layout does not match the sequence length")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab:
        raise ValueError("token id out of range")
    if labels.shape[0] != B:
        raise ValueError("one root label per sequence is required")
    P = {k: v if isinstance(v, ad.Tensor) else ad.Tensor(v) for k, v in params.items()}
    tok = ad.take(P["token_embeddings"], tokens)
    inputs = tok
    if return_inputs:
        inputs = ad.Tensor(tok.data, requires_grad=True)
        tok = inputs
    h = ad.add(tok, ad.take(P["position_embeddings"], layout.positions))
    g = ad.reshape(P["initial_query"], (1, 1, cfg.dim))
    if cfg.use_label:
        if labels.max() >= cfg.labels or labels.min() < 0:
            raise ValueError("root label out of range")
        g = ad.add(g, ad.reshape(ad.take(P["label_embeddings"], labels), (B, 1, cfg.dim)))
    g = ad.add(g, ad.Tensor(np.zeros((B, S, cfg.dim), dtype=h.dtype)))
    for i in range(cfg.layers):
        p = lambda n: P[f"l{i}.{n}"]  # noqa: E731
        last = i == cfg.layers - 1
        hn = ad.layer_norm(h, p("ln1_g"), p("ln1_b"))
        gn = ad.layer_norm(g, p("ln1_g"), p("ln1_b"))
        k = ad.matmul(hn, p("wk"))
        v = ad.matmul(hn, p("wv"))
        g_att = _attention(ad.matmul(gn, p("wq")), k, v, layout.query_mask, cfg.heads, stats)
        g = ad.add(g, ad.add(ad.matmul(g_att, p("wo")), p("bo")))
        g = ad.add(g, _mlp(g, p))
        if not last:
            h_att = _attention(ad.matmul(hn, p("wq")), k, v, layout.ctx_mask, cfg.heads, stats)
            h = ad.add(h, ad.add(ad.matmul(h_att, p("wo")), p("bo")))
            h = ad.add(h, _mlp(h, p))
    out = ad.layer_norm(g, P["lnf_g"], P["lnf_b"])
    logits = ad.matmul(out, ad.transpose(P["token_embeddings"], (1, 0)))
    return (logits, inputs) if return_inputs else logits


def _mlp(x, p):
    y = ad.layer_norm(x, p("ln2_g"), p("ln2_b"))
    y = ad.gelu(ad.add(ad.matmul(y, p("w1")), p("b1")))
    return ad.add(ad.matmul(y, p("w2")), p("b2"))


def make_batch(cfg: CgtConfig, tokens, labels):
    """Sequences, labels and layout for the configured training variant."""
    tokens = np.asarray(tokens, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if tokens.ndim != 2 or tokens.shape[1] != cfg.shape.T:
        raise ValueError("expected an (N, T) token matrix")
    if len(tokens) == 0:
        raise ValueError("empty batch")
    if cfg.variant == "cost_efficient":
        seqs, labs = to_paths(tokens, cfg, labels)
        return seqs, labs, path_layout(cfg, len(tokens))
    return tokens, labels, full_layout(cfg)


def loss(params, cfg: CgtConfig, tokens, labels, stats=None, weights=None) -> ad.Tensor:
    """Mean negative log-likelihood over scored positions.

    ``weights`` (N, T) can mask tree positions; the cost-efficient layout scores
    each tree position on exactly one path.
    """
    seqs, labs, layout = make_batch(cfg, tokens, labels)
    w = layout.loss_weights
    if weights is not None:
        weights = np.asarray(weights, dtype=np.float64)
        w = weights[:, cfg.shape.path_table].reshape(seqs.shape) * w if w is not None else weights
    logits = forward(params, cfg, seqs, labs, layout, stats)
    return ad.cross_entropy(logits, seqs, w)


def backward(params: dict, cfg: CgtConfig, tokens, labels, weights=None) -> tuple[float, dict]:
    names = list(params)
    leaves = {k: ad.param(params[k], k) for k in names}
    value = loss(leaves, cfg, tokens, labels, weights=weights)
    if not np.isfinite(value.data):
        raise FloatingPointError("non-finite loss")
    grads = ad.grad(value, [leaves[k] for k in names])
    return float(value.data), dict(zip(names, grads))


def perplexity(params, cfg: CgtConfig, tokens, labels, batch: int = 256) -> float:
    """exp of the mean NLL per tree position over a token set."""
    total, count = 0.0, 0
    for lo in range(0, len(tokens), batch):
        t, y = tokens[lo:lo + batch], labels[lo:lo + batch]
        seqs, labs, layout = make_batch(cfg, t, y)
        w = layout.loss_weights
        logits = forward(params, cfg, seqs, labs, layout)
        n = w.sum() if w is not None else seqs.size
        total += float(ad.cross_entropy(logits, seqs, w).data) * n
        count += n
    return math.exp(total / count)


def attention_flops(cfg: CgtConfig, n_trees: int) -> int:
    """Attention multiply-adds of one forward pass over ``n_trees`` trees."""
    stats: dict = {}
    tokens = np.full((n_trees, cfg.shape.T), cfg.null_token, dtype=np.int64)
    tokens[:, 0] = 0
    small = {k: np.zeros(v, dtype=np.float32) for k, v in param_shapes(cfg).items()}
    loss(small, cfg, tokens, np.zeros(n_trees, dtype=np.int64), stats=stats)
    return stats["attention_flops"]


@dataclass
class TrainConfig:
    steps: int = 1000
    lr: float = 1e-3
    batch_size: int = 64
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    cosine: bool = False
    per_example: bool = False
    checkpoint_every: int = 0  # in epochs; 0 disables
    checkpoint_dir: str | None = None
    log_every: int = 0


@dataclass
class TrainResult:
    params: dict
    trace: list = field(default_factory=list)
    privacy: dict | None = None


class Adam:
    def __init__(self, params: dict, tc: TrainConfig):
        self.tc = tc
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float) -> None:
        tc = self.tc
        self.t += 1
        c1 = 1.0 - tc.beta1**self.t
        c2 = 1.0 - tc.beta2**self.t
        for k, g in grads.items():
            m = self.m[k] = tc.beta1 * self.m[k] + (1.0 - tc.beta1) * g
            v = self.v[k] = tc.beta2 * self.v[k] + (1.0 - tc.beta2) * g * g
            upd = lr * (m / c1) / (np.sqrt(v / c2) + tc.adam_eps)
            params[k] = (params[k] - upd).astype(params[k].dtype)


def _flatten(grads: dict, names) -> np.ndarray:
    return np.concatenate([grads[k].ravel() for k in names])


def _unflatten(flat: np.ndarray, params: dict, names) -> dict:
    out, off = {}, 0
    for k in names:
        n = params[k].size
        out[k] = flat[off:off + n].reshape(params[k].shape)
        off += n
    return out


def train(data: TokenSet, cfg: CgtConfig, tc: TrainConfig | None = None, dp: DpSgdConfig | None = None,
          seed: int = 0, params: dict | None = None, dtype=np.float32) -> TrainResult:
    """Adam on minibatches; per-example clipping and noise when ``dp`` is given."""
    tc = tc or TrainConfig()
    if len(data) == 0:
        raise ValueError("no training sequences")
    params = init_params(cfg, seed, dtype) if params is None else {k: v.copy() for k, v in params.items()}
    names = list(params)
    opt = Adam(params, tc)
    order_rng = generator(seed, "cgt-batches")
    noise_rng = generator(seed, "dp-sgd-noise")
    n = len(data)
    bs = min(tc.batch_size, n)
    per_epoch = max(1, n // bs)
    perm, cursor, epoch = order_rng.permutation(n), 0, 0
    trace = []
    for step in range(tc.steps):
        if cursor + bs > n:
            perm, cursor = order_rng.permutation(n), 0
        idx = np.sort(perm[cursor:cursor + bs])
        cursor += bs
        toks, labs = data.tokens[idx], data.labels[idx]
        if dp is not None or tc.per_example:
            losses, rows = [], []
            for j in range(len(idx)):
                lv, gj = backward(params, cfg, toks[j:j + 1], labs[j:j + 1])
                losses.append(lv)
                rows.append(_flatten(gj, names))
            stacked = np.stack(rows)
            if dp is not None:
                flat = clip_and_noise(stacked, dp, noise_rng)
            else:
                flat = stacked.sum(axis=0) / stacked.dtype.type(len(rows))
            grads = _unflatten(flat, params, names)
            value = float(np.mean(losses))
        else:
            try:
                value, grads = backward(params, cfg, toks, labs)
            except FloatingPointError:
                value = math.nan
        trace.append((step, value))
        if not math.isfinite(value):
            raise TrainingDivergedError(step, trace)
        lr = tc.lr
        if tc.cosine:
            lr = 0.5 * tc.lr * (1.0 + math.cos(math.pi * step / max(tc.steps, 1)))
        opt.step(params, grads, lr)
        if tc.log_every and (step + 1) % tc.log_every == 0:
            logger.info("step %d loss %.4f", step + 1, value)
        if (step + 1) % per_epoch == 0:
            epoch += 1
            if tc.checkpoint_every and tc.checkpoint_dir and epoch % tc.checkpoint_every == 0:
                save_model(Path(tc.checkpoint_dir) / f"epoch{epoch:04d}.cgt", params, cfg)
    privacy = None
    if dp is not None:
        privacy = DpSgdConfig(dp.clip_norm, dp.noise_multiplier, dp.delta, tc.steps, bs / n).report()
    return TrainResult(params, trace, privacy)


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def generate(params: dict, cfg: CgtConfig, count: int, label_dist, temperature: float = 1.0,
             seed: int = 0, batch: int = 512) -> TokenSet:
    """Sample ``count`` token trees node by node in BFS order.

    Root labels are drawn from ``label_dist`` (probabilities over labels).  Every
    token sees only its ancestors and the label, so with the ancestor mask a
    whole tree layer is sampled in one pass.  Children of null are forced null
    and the root is never null.  ``temperature = 0`` takes the argmax.
    """
    if count <= 0:
        raise ValueError("count must be positive")
    if temperature < 0:
        raise ValueError("temperature must be >= 0")
    label_dist = np.asarray(label_dist, dtype=np.float64)
    label_dist = label_dist / label_dist.sum()
    rng = generator(seed, "cgt-generate")
    labels = rng.choice(len(label_dist), size=count, p=label_dist)
    shape = cfg.shape
    ancestor = cfg.use_ancestor_mask or cfg.variant == "cost_efficient"
    layout = full_layout(cfg, ancestor_mask=ancestor)
    if ancestor:
        groups = [np.arange(shape.layer_start(l), shape.layer_start(l) + cfg.s**l) for l in range(cfg.L + 1)]
    else:
        groups = [np.array([t]) for t in range(shape.T)]
    null = cfg.null_token
    parent = np.concatenate([[-1], (np.arange(1, shape.T) - 1) // cfg.s])
    out = np.full((count, shape.T), null, dtype=np.int64)
    for lo in range(0, count, batch):
        toks = out[lo:lo + batch]
        labs = labels[lo:lo + batch]
        for pos in groups:
            logits = forward(params, cfg, toks, labs, layout).data[:, pos, :].astype(np.float64)
            if pos[0] == 0:
                logits[..., null] = -np.inf
            if temperature == 0:
                choice = logits.argmax(axis=-1)
            else:
                p = _softmax_rows(logits / temperature)
                cdf = np.cumsum(p, axis=-1)
                u = rng.random(size=cdf.shape[:-1] + (1,))
                choice = np.minimum((cdf < u * cdf[..., -1:]).sum(axis=-1), cfg.vocab - 1)
            if pos[0] != 0:
                choice = np.where(toks[:, parent[pos]] == null, null, choice)
            toks[:, pos] = choice
    return TokenSet(out, labels.astype(np.int64))


def save_model(path, params: dict, cfg: CgtConfig) -> None:
    cfg_json = json.dumps(asdict(cfg), sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(cfg_json)))
        fh.write(cfg_json)
        for name, shp in param_shapes(cfg).items():
            arr = np.asarray(params[name])
            if arr.shape != shp:
                raise ValueError(f"parameter {name} has shape {arr.shape}, expected {shp}")
            fh.write(arr.astype("<f4").tobytes())


def load_model(path) -> tuple[dict, CgtConfig]:
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    version, n = struct.unpack_from("<II", data, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    cfg = CgtConfig(**json.loads(data[12:12 + n]))
    off = 12 + n
    params = {}
    for name, shp in param_shapes(cfg).items():
        size = int(np.prod(shp))
        params[name] = np.frombuffer(data, "<f4", size, off).reshape(shp).astype(np.float32)
        off += 4 * size
    if off != len(data):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return params, cfg


def write_loss_trace(path, trace) -> None:
    with open(path, "w") as fh:
        fh.write("step,loss\n")
        for step, value in trace:
            fh.write(f"{step},{value!r}\n")
