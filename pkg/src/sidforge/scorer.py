"""Small trainable autoregressive scorer over attribute+SID token paths.

Forward path per decoding step t: a gated single-layer cross-attention
over the user's behavior sequence produces a context vector q_t; the rank
head for step t is an affine map over x_t = [q_t | recent-prefix token
embeddings | hashed content summary | mean-pooled behavior embedding]
followed by a softmax over that step's vocabulary.

Attention projections and the gate are frozen at their random
initialization; embeddings, the shared hash table, and the per-step rank
heads train with analytic gradients (no autograd framework involved).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .tokenizer import HashSpec, SequenceSpace, content_summary_rows

FROZEN_TENSORS = ("attn_wq", "attn_wk", "attn_wv", "attn_gamma")


class ScorerError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


@dataclass
class ScorerConfig:
    d_model: int = 32
    prefix_window: int = 4
    seed: int = 0


@dataclass
class Sample:
    """One teacher-forcing example: behavior context and a target path."""

    behavior: tuple  # behavior token ids, may be empty
    bos: int
    tokens: tuple  # m+L target tokens, local ids per step
    alpha: float = 1.0
    metrics: dict = field(default_factory=dict)
    level: int = 1
    target_item: int | None = None
    request_id: str | None = None


@dataclass
class ScorerParams:
    config: ScorerConfig
    space: SequenceSpace
    hash_spec: HashSpec
    n_behavior_tokens: int
    tensors: dict  # name -> np.ndarray

    @property
    def pad_token(self) -> int:
        return self.n_behavior_tokens

    @property
    def x_dim(self) -> int:
        d = self.config.d_model
        return d + self.config.prefix_window * d + self.hash_spec.output_dim + d

    def frozen_names(self) -> tuple:
        return FROZEN_TENSORS

    def trainable_names(self) -> list:
        return [n for n in self.tensors if n not in FROZEN_TENSORS]


def init_scorer(space: SequenceSpace, hash_spec: HashSpec, n_behavior_tokens: int,
                config: ScorerConfig) -> ScorerParams:
    """Symmetric-uniform init scaled by 1/sqrt(fan_in); gate starts at 1."""
    rng = np.random.default_rng(config.seed)
    d = config.d_model

    def uniform(shape, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    tensors = {}
    tensors["emb_bos"] = uniform((space.n_task_tokens, d), d)
    for t in range(1, space.n_steps + 1):
        tensors[f"emb_step_{t}"] = uniform((space.step_vocab_size(t), d), d)
    tensors["emb_behavior"] = uniform((n_behavior_tokens + 1, d), d)
    tensors["emb_hash"] = uniform((hash_spec.table_rows, hash_spec.d_hash), hash_spec.d_hash)

    params = ScorerParams(config, space, hash_spec, n_behavior_tokens, tensors)
    x_dim = params.x_dim
    for t in range(1, space.n_steps + 1):
        v = space.step_vocab_size(t)
        tensors[f"head_w_{t}"] = uniform((v, x_dim), x_dim)
        tensors[f"head_b_{t}"] = np.zeros(v)

    tensors["attn_wq"] = uniform((d, d), d)
    tensors["attn_wk"] = uniform((d, d), d)
    tensors["attn_wv"] = uniform((d, d), d)
    tensors["attn_gamma"] = np.array(1.0)
    return params


def zero_grads(params: ScorerParams) -> dict:
    return {name: np.zeros_like(arr) for name, arr in params.tensors.items()}


_PE_CACHE = {}


def sinusoidal_positions(length: int, d: int) -> np.ndarray:
    key = (length, d)
    if key not in _PE_CACHE:
        pos = np.arange(length)[:, None]
        i = np.arange(d)[None, :]
        angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
        pe = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
        _PE_CACHE[key] = pe
    return _PE_CACHE[key]


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def gated_cross_attention(q, k, v, gamma, d_model) -> np.ndarray:
    """gamma * softmax(q k^T / sqrt(d_model)) v, row-wise softmax."""
    q, k, v = np.asarray(q), np.asarray(k), np.asarray(v)
    if q.shape[-1] != k.shape[-1] or k.shape[0] != v.shape[0]:
        raise ScorerError(
            f"attention dimension mismatch: q{q.shape} k{k.shape} v{v.shape}"
        )
    scores = q @ k.T / math.sqrt(d_model)
    return float(gamma) * (_softmax_rows(scores) @ v)


def _behavior_context(params: ScorerParams, behavior_seq):
    """(tokens, raw embeddings, keys, values, h_agg) for one behavior sequence."""
    tokens = tuple(behavior_seq) if len(behavior_seq) else (params.pad_token,)
    emb_table = params.tensors["emb_behavior"]
    for b in tokens:
        if not 0 <= b < emb_table.shape[0]:
            raise ScorerError(f"unknown behavior token {b}")
    emb = emb_table[list(tokens)]
    kv_in = emb + sinusoidal_positions(len(tokens), params.config.d_model)
    keys = kv_in @ params.tensors["attn_wk"]
    values = kv_in @ params.tensors["attn_wv"]
    return tokens, emb, keys, values, emb.mean(axis=0)


def encode_context(behavior_seq, params: ScorerParams):
    """Projected behavior embeddings with positional encodings, plus the
    position-free mean-pooled behavior embedding."""
    _, _, keys, values, h_agg = _behavior_context(params, behavior_seq)
    return keys, values, h_agg


@dataclass
class StepState:
    q_t: np.ndarray
    e_prefix: np.ndarray  # flattened prefix_window * d_model slots
    c_t: np.ndarray
    h_agg: np.ndarray


def step_logits(state: StepState, t: int, params: ScorerParams) -> np.ndarray:
    if not 1 <= t <= params.space.n_steps:
        raise ScorerError(f"step {t} out of range 1..{params.space.n_steps}")
    x = np.concatenate([state.q_t, state.e_prefix, state.c_t, state.h_agg])
    return params.tensors[f"head_w_{t}"] @ x + params.tensors[f"head_b_{t}"]


def _prefix_slots(params, tokens, t):
    """Most-recent-first window of decoded-token embeddings, zero padded.

    Returns (flat vector, list of (slot, step) actually filled).
    """
    d = params.config.d_model
    w = params.config.prefix_window
    flat = np.zeros(w * d)
    filled = []
    for s in range(w):
        j = t - 1 - s  # decoding step whose token occupies slot s
        if j >= 1:
            flat[s * d:(s + 1) * d] = params.tensors[f"emb_step_{j}"][tokens[j - 1]]
            filled.append((s, j))
    return flat, filled


@dataclass
class _Cache:
    sample: Sample
    beh_tokens: tuple
    beh_emb: np.ndarray
    keys: np.ndarray
    values: np.ndarray
    h_agg: np.ndarray
    q_in: np.ndarray
    attn: np.ndarray  # softmax rows (n_steps, T)
    ctx: np.ndarray  # gated context rows (n_steps, d)
    x_rows: list  # x_t per step
    probs: list  # softmax per step
    target_logps: np.ndarray
    prefix_filled: list  # per step, list of (slot, step)
    hash_rows: list  # per step, row indices of the content summary


def _forward_sample(params: ScorerParams, sample: Sample) -> _Cache:
    space, spec, cfg = params.space, params.hash_spec, params.config
    d = cfg.d_model
    n_steps = space.n_steps
    if len(sample.tokens) != n_steps:
        raise ScorerError(
            f"sample has {len(sample.tokens)} tokens, space expects {n_steps}"
        )
    for t, tok in enumerate(sample.tokens, start=1):
        if not 0 <= tok < space.step_vocab_size(t):
            raise ScorerError(f"target token {tok} out of range at step {t}")

    beh_tokens, beh_emb, keys, values, h_agg = _behavior_context(params, sample.behavior)

    # query row j holds the token decoded at step j (row 0: the task BOS)
    q_emb = np.empty((n_steps, d))
    q_emb[0] = params.tensors["emb_bos"][sample.bos]
    for j in range(1, n_steps):
        q_emb[j] = params.tensors[f"emb_step_{j}"][sample.tokens[j - 1]]
    q_in = (q_emb + sinusoidal_positions(n_steps, d)) @ params.tensors["attn_wq"]

    scores = q_in @ keys.T / math.sqrt(d)
    attn = _softmax_rows(scores)
    gamma = float(params.tensors["attn_gamma"])
    ctx = gamma * (attn @ values)

    globals_by_step = {
        j: space.global_index(j, sample.tokens[j - 1]) for j in range(1, n_steps + 1)
    }
    x_rows, probs, prefix_filled, rows_per_step = [], [], [], []
    target_logps = np.empty(n_steps)
    hash_table = params.tensors["emb_hash"]
    for t in range(1, n_steps + 1):
        prefix_flat, filled = _prefix_slots(params, sample.tokens, t)
        rows = content_summary_rows({j: g for j, g in globals_by_step.items() if j < t}, spec)
        c_t = hash_table[rows].reshape(-1)
        x = np.concatenate([ctx[t - 1], prefix_flat, c_t, h_agg])
        logits = params.tensors[f"head_w_{t}"] @ x + params.tensors[f"head_b_{t}"]
        if not np.all(np.isfinite(logits)):
            raise ScorerError(f"non-finite logits in tensor head_w_{t} at step {t}")
        logp = _log_softmax(logits)
        x_rows.append(x)
        probs.append(np.exp(logp))
        prefix_filled.append(filled)
        rows_per_step.append(rows)
        target_logps[t - 1] = logp[sample.tokens[t - 1]]

    return _Cache(
        sample=sample,
        beh_tokens=beh_tokens,
        beh_emb=beh_emb,
        keys=keys,
        values=values,
        h_agg=h_agg,
        q_in=q_in,
        attn=attn,
        ctx=ctx,
        x_rows=x_rows,
        probs=probs,
        target_logps=target_logps,
        prefix_filled=prefix_filled,
        hash_rows=rows_per_step,
    )


def _accumulate_backward(params: ScorerParams, cache: _Cache, coeffs, grads):
    """Add the gradient of sum_t coeffs[t-1] * log p(target_t | .) to grads.

    Frozen tensors are skipped (their grads stay zero).
    """
    space, cfg = params.space, params.config
    d = cfg.d_model
    n_steps = space.n_steps
    sample = cache.sample
    gamma = float(params.tensors["attn_gamma"])

    d_ctx = np.zeros((n_steps, d))
    d_h_agg = np.zeros(d)
    c_dim = params.hash_spec.output_dim
    d_hash_dim = params.hash_spec.d_hash

    for t in range(1, n_steps + 1):
        c = coeffs[t - 1]
        if c == 0.0:
            continue
        p = cache.probs[t - 1]
        delta = -c * p
        delta[sample.tokens[t - 1]] += c  # c * (onehot - p)
        x = cache.x_rows[t - 1]
        grads[f"head_w_{t}"] += np.outer(delta, x)
        grads[f"head_b_{t}"] += delta
        dx = params.tensors[f"head_w_{t}"].T @ delta

        d_ctx[t - 1] += dx[:d]
        d_prefix = dx[d:d + cfg.prefix_window * d]
        for slot, j in cache.prefix_filled[t - 1]:
            grads[f"emb_step_{j}"][sample.tokens[j - 1]] += d_prefix[slot * d:(slot + 1) * d]
        d_c = dx[d + cfg.prefix_window * d:d + cfg.prefix_window * d + c_dim]
        d_c = d_c.reshape(-1, d_hash_dim)
        for r, row in enumerate(cache.hash_rows[t - 1]):
            grads["emb_hash"][row] += d_c[r]
        d_h_agg += dx[-d:]

    # attention backward (queries and keys/values feed the embeddings)
    d_attn_out = d_ctx  # ctx = gamma * attn @ values
    d_attn = gamma * (d_attn_out @ cache.values.T)
    d_values = gamma * (cache.attn.T @ d_attn_out)
    a = cache.attn
    d_scores = a * (d_attn - (d_attn * a).sum(axis=1, keepdims=True))
    scale = 1.0 / math.sqrt(d)
    d_q_in = d_scores @ cache.keys * scale
    d_keys = d_scores.T @ cache.q_in * scale

    d_q_emb = d_q_in @ params.tensors["attn_wq"].T
    grads["emb_bos"][sample.bos] += d_q_emb[0]
    for j in range(1, n_steps):
        grads[f"emb_step_{j}"][sample.tokens[j - 1]] += d_q_emb[j]

    d_kv_in = d_keys @ params.tensors["attn_wk"].T + d_values @ params.tensors["attn_wv"].T
    n_beh = len(cache.beh_tokens)
    d_beh = d_kv_in + d_h_agg / n_beh
    for i, b in enumerate(cache.beh_tokens):
        grads["emb_behavior"][b] += d_beh[i]


def ntp_loss_and_grad(batch, params: ScorerParams):
    """Teacher-forced next-token loss summed over samples and steps.

    loss = -sum_i alpha_i * sum_t log p(target_{i,t} | prefix, context).
    """
    grads = zero_grads(params)
    loss = 0.0
    for sample in batch:
        cache = _forward_sample(params, sample)
        loss += -sample.alpha * float(cache.target_logps.sum())
        coeffs = np.full(params.space.n_steps, -sample.alpha)
        _accumulate_backward(params, cache, coeffs, grads)
    if not math.isfinite(loss):
        raise ScorerError("non-finite training loss")
    return loss, grads


def sequence_logprob(params: ScorerParams, sample: Sample) -> float:
    """Teacher-forced log-probability of the sample's full token path."""
    return float(_forward_sample(params, sample).target_logps.sum())


# ----------------------------------------------------------------------
# incremental interface used by beam search
# ----------------------------------------------------------------------

class NeuralSequenceModel:
    """Step-by-step distributions for one fixed (behavior, task) context."""

    def __init__(self, params: ScorerParams, behavior, bos: int):
        self.params = params
        self.bos = bos
        self.keys, self.values, self.h_agg = encode_context(behavior, params)
        self._q_memo = {}

    def _q_row(self, t: int, last_token):
        key = (t, last_token)
        if key in self._q_memo:
            return self._q_memo[key]
        params = self.params
        d = params.config.d_model
        if t == 1:
            emb = params.tensors["emb_bos"][self.bos]
        else:
            emb = params.tensors[f"emb_step_{t - 1}"][last_token]
        pe = sinusoidal_positions(params.space.n_steps, d)[t - 1]
        q_in = (emb + pe) @ params.tensors["attn_wq"]
        scores = q_in @ self.keys.T / math.sqrt(d)
        a = _softmax_rows(scores[None, :])[0]
        q_t = float(params.tensors["attn_gamma"]) * (a @ self.values)
        self._q_memo[key] = q_t
        return q_t

    def step_logprobs(self, prefix) -> np.ndarray:
        """log p(token | prefix) over the vocabulary of step len(prefix)+1."""
        params = self.params
        space = params.space
        t = len(prefix) + 1
        if t > space.n_steps:
            raise ScorerError("prefix already complete")
        q_t = self._q_row(t, prefix[-1] if prefix else None)
        flat, _ = _prefix_slots(params, tuple(prefix) + (0,) * (space.n_steps - len(prefix)), t)
        globals_by_step = {
            j + 1: space.global_index(j + 1, tok) for j, tok in enumerate(prefix)
        }
        rows = content_summary_rows(globals_by_step, params.hash_spec)
        c_t = params.tensors["emb_hash"][rows].reshape(-1)
        state = StepState(q_t=q_t, e_prefix=flat, c_t=c_t, h_agg=self.h_agg)
        return _log_softmax(step_logits(state, t, params))


class CountScorer:
    """Non-parametric smoothed conditional tables over observed paths.

    p(s_t | prefix) = (count(prefix + t) + k) / (count(prefix) + k * V_t).
    With k=0 the tables are exact on fully observed corpora; querying an
    unseen prefix with k=0 is an error (undefined conditional).
    """

    def __init__(self, sequences, vocab_sizes, smoothing: float = 0.0):
        if smoothing < 0:
            raise ValueError("smoothing must be >= 0")
        self.vocab_sizes = tuple(vocab_sizes)
        self.smoothing = float(smoothing)
        self.prefix_counts = {}
        self.next_counts = {}
        for seq in sequences:
            seq = tuple(seq)
            if len(seq) != len(self.vocab_sizes):
                raise ValueError("sequence length does not match vocab_sizes")
            for t in range(len(seq)):
                prefix = seq[:t]
                self.prefix_counts[prefix] = self.prefix_counts.get(prefix, 0) + 1
                key = (prefix, seq[t])
                self.next_counts[key] = self.next_counts.get(key, 0) + 1

    def step_probs(self, prefix) -> np.ndarray:
        prefix = tuple(prefix)
        t = len(prefix)
        if t >= len(self.vocab_sizes):
            raise ValueError("prefix already complete")
        v = self.vocab_sizes[t]
        total = self.prefix_counts.get(prefix, 0)
        if total == 0 and self.smoothing == 0.0:
            raise ValueError(f"unseen prefix {prefix} with zero smoothing")
        counts = np.full(v, self.smoothing)
        for tok in range(v):
            counts[tok] += self.next_counts.get((prefix, tok), 0)
        return counts / (total + self.smoothing * v)

    def step_logprobs(self, prefix) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.step_probs(prefix))

    def logprob(self, seq) -> float:
        seq = tuple(seq)
        total = 0.0
        for t in range(len(seq)):
            total += float(self.step_logprobs(seq[:t])[seq[t]])
        return total


# ----------------------------------------------------------------------
# optimization
# ----------------------------------------------------------------------

@dataclass
class OptimizerConfig:
    lr: float = 3e-4
    weight_decay: float = 1e-4
    batch_size: int = 64
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class AdamW:
    """Decoupled-weight-decay Adam over the trainable tensors."""

    def __init__(self, params: ScorerParams, cfg: OptimizerConfig):
        self.cfg = cfg
        self.step_count = 0
        self.m = {n: np.zeros_like(a) for n, a in params.tensors.items()
                  if n not in FROZEN_TENSORS}
        self.v = {n: np.zeros_like(a) for n, a in self.m.items()}

    def step(self, params: ScorerParams, grads: dict):
        c = self.cfg
        self.step_count += 1
        t = self.step_count
        for name in self.m:
            g = grads[name]
            self.m[name] = c.beta1 * self.m[name] + (1 - c.beta1) * g
            self.v[name] = c.beta2 * self.v[name] + (1 - c.beta2) * g * g
            m_hat = self.m[name] / (1 - c.beta1**t)
            v_hat = self.v[name] / (1 - c.beta2**t)
            update = m_hat / (np.sqrt(v_hat) + c.eps) + c.weight_decay * params.tensors[name]
            params.tensors[name] -= c.lr * update


def train_epoch(dataset, params: ScorerParams, opt_cfg: OptimizerConfig,
                optimizer: AdamW | None = None, loss_and_grad=ntp_loss_and_grad):
    """One pass over the dataset in batch order; returns per-batch mean losses.

    The batch order is the dataset order (no shuffling here; shuffle the
    dataset deterministically upstream if desired).
    """
    if not dataset:
        raise ValueError("dataset must be non-empty")
    if optimizer is None:
        optimizer = AdamW(params, opt_cfg)
    trace = []
    for start in range(0, len(dataset), opt_cfg.batch_size):
        batch = dataset[start:start + opt_cfg.batch_size]
        loss, grads = loss_and_grad(batch, params)
        mean_loss = loss / len(batch)
        if not math.isfinite(mean_loss):
            raise TrainingDivergedError(f"non-finite loss at batch {len(trace)}", trace)
        trace.append(mean_loss)
        optimizer.step(params, grads)
    return params, trace


def train(dataset, params, opt_cfg, epochs: int):
    """Multi-epoch wrapper sharing one optimizer state; concatenates traces."""
    optimizer = AdamW(params, opt_cfg)
    trace = []
    for _ in range(epochs):
        params, t = train_epoch(dataset, params, opt_cfg, optimizer=optimizer)
        trace.extend(t)
    return params, trace


# ----------------------------------------------------------------------
# checkpoint persistence
# ----------------------------------------------------------------------

def tensor_digest(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr, dtype=np.float64).tobytes()).hexdigest()


def save_checkpoint(params: ScorerParams, path, meta: dict | None = None):
    doc = {
        "config": {
            "d_model": params.config.d_model,
            "prefix_window": params.config.prefix_window,
            "seed": params.config.seed,
        },
        "space": params.space.as_dict(),
        "hash_spec": {
            "pairs": [list(p) for p in params.hash_spec.pairs],
            "pair_sizes": list(params.hash_spec.pair_sizes),
            "m_hashes": params.hash_spec.m_hashes,
            "p1": params.hash_spec.p1,
            "p2": params.hash_spec.p2,
            "d_hash": params.hash_spec.d_hash,
        },
        "n_behavior_tokens": params.n_behavior_tokens,
        "frozen": list(FROZEN_TENSORS),
        "frozen_digests": {n: tensor_digest(params.tensors[n]) for n in FROZEN_TENSORS},
        "tensors": {n: a.tolist() for n, a in params.tensors.items()},
        "meta": meta or {},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_checkpoint(path) -> ScorerParams:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    config = ScorerConfig(**doc["config"])
    space = SequenceSpace.from_dict(doc["space"])
    hs = doc["hash_spec"]
    hash_spec = HashSpec(
        pairs=tuple(tuple(p) for p in hs["pairs"]),
        pair_sizes=tuple(hs["pair_sizes"]),
        m_hashes=hs["m_hashes"],
        p1=hs["p1"],
        p2=hs["p2"],
        d_hash=hs["d_hash"],
    )
    tensors = {n: np.asarray(a, dtype=np.float64) for n, a in doc["tensors"].items()}
    params = ScorerParams(config, space, hash_spec, doc["n_behavior_tokens"], tensors)
    for name, digest in doc["frozen_digests"].items():
        if tensor_digest(tensors[name]) != digest:
            raise ScorerError(f"frozen tensor {name} digest mismatch in checkpoint")
    return params


def clone_params(params: ScorerParams) -> ScorerParams:
    return replace(params, tensors={n: a.copy() for n, a in params.tensors.items()})
