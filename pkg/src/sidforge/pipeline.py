"""End-to-end wiring: run configuration, dataset assembly, pipeline steps.

One JSON run config drives every stage; its SHA-256 digest and the global
seed are stamped into every artifact (inline for single-document JSON,
sidecar ``<name>.meta.json`` for JSONL files) so reruns are auditable and
bit-reproducibility is checkable.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import alignment, corpus as corpus_mod, decoder, evaluation, quantizer, scorer, tokenizer


class ConfigError(ValueError):
    pass


@dataclass
class QuantizerConfig:
    n_layers: int = 3
    k: int = 16
    tau: float | None = 1.05  # None = unbounded (plain residual K-means)
    max_iter: int = 50
    eps_conv: float = 1e-6
    strict: bool = False
    method: str = "capacity"  # "capacity" | "baseline"


@dataclass
class TokenizerConfig:
    attr_chain: tuple = ("l2", "l3")
    d_hash: int = 16
    m_hashes: int = 3
    p1: int = 31
    p2: int = 37
    pairs: tuple | None = None  # default: attrs crossed with first two SID layers


@dataclass
class ScorerSection:
    d_model: int = 32
    prefix_window: int = 4
    max_behavior_len: int = 16


@dataclass
class TrainConfig:
    epochs: int = 3
    lr: float = 3e-4
    weight_decay: float = 1e-4
    batch_size: int = 64


@dataclass
class AlignConfig:
    epochs: int = 1
    lr: float = 1e-4
    batch_size: int = 64
    lam: float = 0.2
    c_clip: float = 3.0
    eps: float = 1e-8
    beta: float = 0.1
    lambda_rft: float = 1.0
    lambda_dpo: float = 0.15  # ratio 20:3 scaled to lambda_rft = 1
    pairs_per_request: int = 4
    dpo_target: str = "last-sid"  # "last-sid" | "all"
    reward_weights: dict = field(default_factory=lambda: {"gmv": 0.7, "watch_time": 0.3})


@dataclass
class DecodeConfig:
    beam_width: int = 16
    top_k: int = 10
    objective: str = "click"
    scene: str = "main_feed"


@dataclass
class EvalConfig:
    ks: tuple = (5, 10, 20)
    beam_width: int = 32
    holdout_frac: float = 0.10


@dataclass
class RunConfig:
    seed: int = 0
    threads: int = 1
    corpus: corpus_mod.SynthConfig = field(default_factory=corpus_mod.SynthConfig)
    quantizer: QuantizerConfig = field(default_factory=QuantizerConfig)
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)
    scorer: ScorerSection = field(default_factory=ScorerSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    align: AlignConfig = field(default_factory=AlignConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


def _build_section(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        ftype = fields[name].type
        if dataclasses.is_dataclass(_resolve_type(cls, name)):
            kwargs[name] = _build_section(_resolve_type(cls, name), value, f"{path}.{name}")
        elif isinstance(value, list) and "tuple" in str(ftype):
            kwargs[name] = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _resolve_type(cls, name):
    sections = {
        "corpus": corpus_mod.SynthConfig,
        "quantizer": QuantizerConfig,
        "tokenizer": TokenizerConfig,
        "scorer": ScorerSection,
        "train": TrainConfig,
        "align": AlignConfig,
        "decode": DecodeConfig,
        "eval": EvalConfig,
    }
    return sections.get(name)


def load_config(path_or_dict) -> RunConfig:
    """Build a RunConfig from a JSON file or dict; unknown keys are errors."""
    if isinstance(path_or_dict, dict):
        data = path_or_dict
    else:
        with open(path_or_dict, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    return _build_section(RunConfig, data, "config")


def config_to_dict(cfg: RunConfig) -> dict:
    return json.loads(json.dumps(dataclasses.asdict(cfg), default=list))


def config_digest(cfg: RunConfig) -> str:
    canonical = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def _write_meta(path, cfg: RunConfig):
    meta = {"config_digest": config_digest(cfg), "seed": cfg.seed}
    with open(str(path) + ".meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, sort_keys=True)


def artifact_meta(cfg: RunConfig) -> dict:
    return {"config_digest": config_digest(cfg), "seed": cfg.seed}


# ----------------------------------------------------------------------
# pipeline steps
# ----------------------------------------------------------------------

def gen_data(cfg: RunConfig, out_dir):
    """Generate and persist the corpus and interaction log.

    The global seed governs every pipeline stage, so it supersedes the
    corpus section's own seed field here.
    """
    os.makedirs(out_dir, exist_ok=True)
    synth = dataclasses.replace(cfg.corpus, seed=cfg.seed)
    corp = corpus_mod.generate_corpus(synth)
    log = corpus_mod.generate_interactions(corp, synth)
    items_path = os.path.join(out_dir, "items.jsonl")
    inter_path = os.path.join(out_dir, "interactions.jsonl")
    corpus_mod.save_items(corp, items_path)
    corpus_mod.save_interactions(log, inter_path)
    _write_meta(items_path, cfg)
    _write_meta(inter_path, cfg)
    return corp, log


def run_quantizer(cfg: RunConfig, corp, out_dir=None):
    q = cfg.quantizer
    if q.method == "baseline":
        result = quantizer.rq_kmeans_baseline(
            corp, q.n_layers, q.k, cfg.seed, max_iter=q.max_iter, eps_conv=q.eps_conv
        )
    elif q.method == "capacity":
        result = quantizer.capacity_constrained_rq(
            corp, q.n_layers, q.k, q.tau, cfg.seed,
            max_iter=q.max_iter, eps_conv=q.eps_conv, strict=q.strict,
        )
    else:
        raise ConfigError(f"unknown quantizer method {q.method!r}")
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        cb_path = os.path.join(out_dir, "codebook.json")
        sid_path = os.path.join(out_dir, "sids.jsonl")
        quantizer.save_codebook(result.codebook, cb_path, meta=artifact_meta(cfg))
        quantizer.save_sids(result.sids, sid_path)
        _write_meta(sid_path, cfg)
    return result


def build_space(cfg: RunConfig, corp) -> tokenizer.SequenceSpace:
    return tokenizer.SequenceSpace(
        attr_chain=tuple(cfg.tokenizer.attr_chain),
        attr_vocabs=corp.attr_vocabs,
        sid_sizes=(cfg.quantizer.k,) * cfg.quantizer.n_layers,
    )


def build_sequences(cfg: RunConfig, corp, sids, out_dir=None):
    """Per-item token paths (attr chain + SID codes), keyed by item_id.

    The BOS token is task-dependent and attached per sample, so sequences
    store only the decoded path.
    """
    space = build_space(cfg, corp)
    by_id = corp.by_id()
    default_ctx = tokenizer.TaskContext(cfg.decode.objective, cfg.decode.scene)
    paths = {}
    for sid in sids:
        seq = tokenizer.build_sequence(by_id[sid.item_id], sid, default_ctx, space)
        paths[sid.item_id] = seq.path
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        seq_path = os.path.join(out_dir, "sequences.jsonl")
        with open(seq_path, "w", encoding="utf-8") as fh:
            for item_id in sorted(paths):
                fh.write(json.dumps({"item_id": item_id, "path": list(paths[item_id])}) + "\n")
        _write_meta(seq_path, cfg)
        with open(os.path.join(out_dir, "space.json"), "w", encoding="utf-8") as fh:
            json.dump({"space": space.as_dict(), "meta": artifact_meta(cfg)}, fh)
    return space, paths


def load_sequences(path) -> dict:
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            unknown = set(obj) - {"item_id", "path"}
            if unknown:
                raise ValueError(f"line {lineno}: unknown field(s) {sorted(unknown)}")
            out[obj["item_id"]] = tuple(obj["path"])
    return out


def assemble_samples(cfg: RunConfig, corp, log, space, paths):
    """Engaged events become teacher-forcing samples; split by request order.

    Behavior context is the user's previously engaged items (most recent
    last, truncated).  The final ``holdout_frac`` of requests by
    request_id order forms the eval split, disjoint from training.
    """
    by_id = corp.by_id()
    mean_gmv = float(np.mean([it.gmv for it in corp.items]))
    history = {}
    samples = []
    requests = sorted(log, key=lambda r: r.request_id)
    max_len = cfg.scorer.max_behavior_len
    for req in requests:
        ctx = tokenizer.TaskContext(req.objective, req.scene)
        bos = tokenizer.task_bos_token(ctx, space)
        user_hist = history.setdefault(req.user_id, [])
        engaged = [e for e in req.events if e["level"] >= corpus_mod.CLICK]
        for e in engaged:
            if e["item_id"] not in paths:
                continue
            samples.append(
                scorer.Sample(
                    behavior=tuple(user_hist[-max_len:]),
                    bos=bos,
                    tokens=paths[e["item_id"]],
                    alpha=alignment.engagement_alpha(
                        e["level"], by_id[e["item_id"]].gmv, mean_gmv
                    ),
                    metrics=dict(req.reward_metrics),
                    level=e["level"],
                    target_item=e["item_id"],
                    request_id=req.request_id,
                )
            )
        for e in engaged:
            user_hist.append(e["item_id"])
    n_eval = max(1, int(cfg.eval.holdout_frac * len(requests)))
    eval_request_ids = {r.request_id for r in requests[-n_eval:]}
    train_set = [s for s in samples if s.request_id not in eval_request_ids]
    eval_set = [s for s in samples if s.request_id in eval_request_ids]
    return train_set, eval_set


def request_contexts(cfg: RunConfig, log, space):
    """(behavior, bos) conditioning per request, mirroring assemble_samples."""
    history = {}
    contexts = {}
    max_len = cfg.scorer.max_behavior_len
    for req in sorted(log, key=lambda r: r.request_id):
        ctx = tokenizer.TaskContext(req.objective, req.scene)
        bos = tokenizer.task_bos_token(ctx, space)
        user_hist = history.setdefault(req.user_id, [])
        contexts[req.request_id] = (tuple(user_hist[-max_len:]), bos)
        for e in req.events:
            if e["level"] >= corpus_mod.CLICK:
                user_hist.append(e["item_id"])
    return contexts


def init_model(cfg: RunConfig, corp, space) -> scorer.ScorerParams:
    spec = tokenizer.hash_spec_for_space(
        space,
        pairs=cfg.tokenizer.pairs,
        m_hashes=cfg.tokenizer.m_hashes,
        p1=cfg.tokenizer.p1,
        p2=cfg.tokenizer.p2,
        d_hash=cfg.tokenizer.d_hash,
    )
    n_behavior = max(it.item_id for it in corp.items) + 1
    sc = scorer.ScorerConfig(
        d_model=cfg.scorer.d_model,
        prefix_window=cfg.scorer.prefix_window,
        seed=cfg.seed,
    )
    return scorer.init_scorer(space, spec, n_behavior, sc)


def train_model(cfg: RunConfig, params, train_set):
    opt = scorer.OptimizerConfig(
        lr=cfg.train.lr,
        weight_decay=cfg.train.weight_decay,
        batch_size=cfg.train.batch_size,
    )
    return scorer.train(train_set, params, opt, cfg.train.epochs)


def align_model(cfg: RunConfig, params, train_set, log, paths, space):
    """Joint advantage-reweighted NTP + preference-pair optimization."""
    a = cfg.align
    reference = scorer.clone_params(params)
    contexts = request_contexts(cfg, log, space)
    pairs = alignment.build_dpo_pairs(log, paths, contexts, a.pairs_per_request, cfg.seed)
    spec = alignment.RewardSpec(
        metric_weights=a.reward_weights, lam=a.lam, c_clip=a.c_clip, eps=a.eps
    )
    opt = scorer.OptimizerConfig(lr=a.lr, weight_decay=cfg.train.weight_decay,
                                 batch_size=a.batch_size)
    optimizer = scorer.AdamW(params, opt)
    stop_grad = a.dpo_target == "last-sid"
    trace = []
    pair_cursor = 0
    for _ in range(a.epochs):
        for start in range(0, len(train_set), a.batch_size):
            batch = train_set[start:start + a.batch_size]
            normalized = alignment.minmax_normalize_metrics([s.metrics for s in batch])
            rewards = [alignment.composite_reward(m, spec) for m in normalized]
            adv = alignment.normalize_advantages(rewards, a.c_clip, a.eps)
            pair_batch = pairs[pair_cursor:pair_cursor + a.batch_size]
            pair_cursor = (pair_cursor + a.batch_size) % max(1, len(pairs))
            loss, grads = alignment.joint_loss(
                batch, pair_batch, params, reference, adv,
                lam=a.lam, beta=a.beta, stop_grad=stop_grad,
                lambda_rft=a.lambda_rft, lambda_dpo=a.lambda_dpo,
            )
            trace.append(loss / len(batch))
            optimizer.step(params, grads)
    return params, trace


def run_pipeline(cfg: RunConfig, out_dir):
    """gen-data -> quantize -> sequences -> train -> align -> decode -> eval."""
    os.makedirs(out_dir, exist_ok=True)
    corp, log = gen_data(cfg, out_dir)
    rq = run_quantizer(cfg, corp, out_dir)
    space, paths = build_sequences(cfg, corp, rq.sids, out_dir)
    train_set, eval_set = assemble_samples(cfg, corp, log, space, paths)
    params = init_model(cfg, corp, space)
    params, trace = train_model(cfg, params, train_set)
    params, align_trace = align_model(cfg, params, train_set, log, paths, space)
    scorer.save_checkpoint(params, os.path.join(out_dir, "checkpoint.json"),
                           meta=artifact_meta(cfg))

    trie = decoder.build_trie(paths)
    report = evaluation.evaluate_model(
        params, trie, eval_set or train_set,
        ks=cfg.eval.ks, beam_width=cfg.eval.beam_width,
        metadata=artifact_meta(cfg),
    )
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(report.as_dict(), fh, sort_keys=True)

    ctx = tokenizer.TaskContext(cfg.decode.objective, cfg.decode.scene)
    bos = tokenizer.task_bos_token(ctx, space)
    model = scorer.NeuralSequenceModel(params, (), bos)
    candidates = decoder.beam_search(model, trie, cfg.decode.beam_width, cfg.decode.top_k)
    cand_path = os.path.join(out_dir, "candidates.jsonl")
    with open(cand_path, "w", encoding="utf-8") as fh:
        for c in candidates:
            fh.write(json.dumps(
                {"path": list(c.path), "logprob": c.logprob, "item_ids": list(c.item_ids)}
            ) + "\n")
    _write_meta(cand_path, cfg)
    return report


def ablation_run(cfg: RunConfig, corp, log, attr_chains, quantizer_methods):
    """Train one arm per (attr_chain, quantizer method) with a shared budget.

    Every arm sees the same corpus, interaction log, seed, and epoch
    budget; only the attribute chain and the quantizer differ.
    """
    reports = {}
    for method in quantizer_methods:
        arm_cfg = dataclasses.replace(
            cfg, quantizer=dataclasses.replace(cfg.quantizer, method=method)
        )
        rq = run_quantizer(arm_cfg, corp)
        for chain in attr_chains:
            arm_cfg2 = dataclasses.replace(
                arm_cfg, tokenizer=dataclasses.replace(arm_cfg.tokenizer,
                                                       attr_chain=tuple(chain))
            )
            space, paths = build_sequences(arm_cfg2, corp, rq.sids)
            train_set, eval_set = assemble_samples(arm_cfg2, corp, log, space, paths)
            params = init_model(arm_cfg2, corp, space)
            params, _ = train_model(arm_cfg2, params, train_set)
            trie = decoder.build_trie(paths)
            name = f"{method}:{'>'.join(chain) if chain else 'direct-sid'}"
            reports[name] = evaluation.evaluate_model(
                params, trie, eval_set or train_set,
                ks=arm_cfg2.eval.ks, beam_width=arm_cfg2.eval.beam_width,
                metadata={"arm": name, **artifact_meta(arm_cfg2)},
            )
    return reports
