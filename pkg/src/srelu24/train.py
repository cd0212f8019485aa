"""Desk-scale training harness: a byte-level n-gram MLP language model whose
blocks are the sparse-recipe FFN, trained with AdamW under a linear-warmup +
cosine schedule. The harness runs a dense warmup phase before enabling the
configured sparsity, tracks activation sparsity and drop fractions, counts
GEMM work, detects divergence, and can replay the whole ablation matrix.
"""

import json
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import ffn as ffn_mod
from .config import config_as_dict
from .errors import ConfigError, DataError, DivergenceError
from .ffn import FfnConfig, FfnParams
from .matcore import WORKING, gemm, gemm_at, write_matrix

ADAM_EPS = 1e-8


@dataclass(frozen=True)
class ToyModelConfig:
    vocab_size: int = 256
    context: int = 8
    embed_dim: int = 64
    hidden: int = 256
    num_blocks: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be at least 2")
        if self.hidden % 4 != 0:
            raise ConfigError(f"hidden must be a multiple of 4, got {self.hidden}")
        if self.context < 1 or self.embed_dim % self.context != 0:
            raise ConfigError(
                f"embed_dim ({self.embed_dim}) must be a positive multiple of context ({self.context})"
            )


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    warmup_dense_steps: int = 100
    batch_tokens: int = 64
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.033
    grad_clip: float = 1.0
    lr_warmup_steps: int = 100
    lr_schedule: str = "linear_warmup_cosine"
    eval_every: int = 100
    eval_tokens: int = 2048
    seed: int = 0
    split_fraction: float = 0.9
    plan_refresh_every: int = 1
    ffn: FfnConfig = field(default_factory=FfnConfig)

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError("steps must be non-negative")
        if not 0 <= self.warmup_dense_steps <= max(self.steps, 0):
            raise ConfigError("warmup_dense_steps must lie in [0, steps]")
        if self.batch_tokens < 1:
            raise ConfigError("batch_tokens must be positive")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be positive")
        if self.lr_schedule != "linear_warmup_cosine":
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")
        if not 0.0 < self.split_fraction <= 1.0:
            raise ConfigError("split_fraction must be in (0, 1]")
        if self.plan_refresh_every < 1:
            raise ConfigError("plan_refresh_every must be positive")


@dataclass
class MetricsRecord:
    step: int
    train_loss: float
    eval_loss: float
    per_layer_sparsity: list[float]  # zero fraction of the activation, dense telemetry pass
    per_layer_dropped_fraction: list[float]  # from this step's forward sparsification
    macs_this_step: int  # FFN census only (the instrumented part of the model)
    gemms_dense: int
    gemms_sparse: int


# ---------------------------------------------------------------------------
# Dataset: next-byte prediction over a sliding context window
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DataSplit:
    contexts: np.ndarray  # [N, context] uint8 byte ids
    targets: np.ndarray  # [N] uint8

    def __len__(self):
        return len(self.targets)


def build_dataset(corpus_path, context: int, split_fraction: float = 0.9):
    """Byte-level (context window -> next byte) pairs with a deterministic
    contiguous train/eval split."""
    data = Path(corpus_path).read_bytes()
    if len(data) == 0:
        raise DataError(f"corpus {corpus_path} is empty")
    if len(data) <= context:
        raise DataError(f"corpus has {len(data)} bytes, need more than context={context}")
    arr = np.frombuffer(data, dtype=np.uint8)
    windows = np.lib.stride_tricks.sliding_window_view(arr, context)[:-1]
    targets = arr[context:]
    n_train = int(len(targets) * split_fraction)
    if n_train == len(targets):
        warnings.warn("split_fraction leaves an empty eval set", stacklevel=2)
    train = DataSplit(np.ascontiguousarray(windows[:n_train]), targets[:n_train].copy())
    evals = DataSplit(np.ascontiguousarray(windows[n_train:]), targets[n_train:].copy())
    return train, evals


# ---------------------------------------------------------------------------
# Model: embed bytes, concatenate the context, residual FFN blocks, project
# ---------------------------------------------------------------------------


class ToyModel:
    def __init__(self, cfg: ToyModelConfig, activation: str = "squared_relu"):
        self.cfg = cfg
        d = cfg.embed_dim
        h = cfg.hidden
        e = d // cfg.context
        rng = np.random.Generator(np.random.PCG64(cfg.seed))
        self.embed = (rng.standard_normal((cfg.vocab_size, e)) * 0.02).astype(WORKING)
        self.blocks: list[FfnParams] = []
        for _ in range(cfg.num_blocks):
            w1 = (rng.standard_normal((d, h)) / math.sqrt(d)).astype(WORKING)
            w2 = (rng.standard_normal((h, d)) / math.sqrt(h)).astype(WORKING)
            w3 = None
            if activation == "swiglu":
                w3 = (rng.standard_normal((d, h)) / math.sqrt(d)).astype(WORKING)
            self.blocks.append(FfnParams(w1=w1, w2=w2, w3=w3))
        self.head = (rng.standard_normal((d, cfg.vocab_size)) * 0.02).astype(WORKING)

    def parameters(self) -> dict[str, np.ndarray]:
        out = {"embed": self.embed}
        for i, b in enumerate(self.blocks):
            out[f"block{i}.w1"] = b.w1
            out[f"block{i}.w2"] = b.w2
            if b.w3 is not None:
                out[f"block{i}.w3"] = b.w3
        out["head"] = self.head
        return out

    def embed_batch(self, ids: np.ndarray) -> np.ndarray:
        n = ids.shape[0]
        return self.embed[ids].reshape(n, self.cfg.embed_dim)

    def forward(self, ids: np.ndarray, cfg: FfnConfig, plans=None):
        x = self.embed_batch(ids)
        xs = [x]
        caches = []
        for i, bp in enumerate(self.blocks):
            plan = plans[i] if plans is not None else None
            y, cache = ffn_mod.ffn_forward(x, bp, cfg, plan)
            x = x + y
            xs.append(x)
            caches.append(cache)
        logits = gemm(x, self.head)
        return logits, xs, caches

    def loss_and_grads(self, ids, targets, cfg: FfnConfig, plans=None):
        logits, xs, caches = self.forward(ids, cfg, plans)
        loss, dlogits = softmax_cross_entropy(logits, targets)
        grads: dict[str, np.ndarray] = {}
        census = [ev for c in caches for ev in c.census]
        grads["head"] = gemm_at(xs[-1], dlogits)
        g = gemm(dlogits, np.ascontiguousarray(self.head.T))
        for i in reversed(range(len(self.blocks))):
            fg = ffn_mod.ffn_backward(g, caches[i], self.blocks[i], cfg)
            grads[f"block{i}.w1"] = fg.d_w1
            grads[f"block{i}.w2"] = fg.d_w2
            if fg.d_w3 is not None:
                grads[f"block{i}.w3"] = fg.d_w3
            census.extend(fg.census)
            g = g + fg.d_x
        d_embed = np.zeros_like(self.embed)
        e = self.embed.shape[1]
        np.add.at(d_embed, ids, g.reshape(ids.shape[0], self.cfg.context, e))
        grads["embed"] = d_embed
        return loss, grads, caches, census


def softmax_cross_entropy(logits: np.ndarray, targets: np.ndarray):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    n = logits.shape[0]
    with np.errstate(over="ignore", invalid="ignore"):
        m = logits.max(axis=1, keepdims=True)
        ez = np.exp(logits - m)
        denom = ez.sum(axis=1, keepdims=True)
        logp = (logits[np.arange(n), targets] - m[:, 0]) - np.log(denom[:, 0])
        loss = float(-np.mean(logp))
        dlogits = ez / denom
        dlogits[np.arange(n), targets] -= 1
        dlogits /= np.float32(n)
    return loss, dlogits.astype(WORKING, copy=False)


# ---------------------------------------------------------------------------
# AdamW with global-norm clipping and the warmup+cosine schedule
# ---------------------------------------------------------------------------


def lr_at(cfg: TrainConfig, step: int) -> float:
    """Learning rate for a 1-based step: linear warmup, then cosine decay
    from full lr on the first post-warmup step to zero on the last step."""
    w = cfg.lr_warmup_steps
    if w > 0 and step <= w:
        return cfg.lr * step / w
    horizon = max(cfg.steps - w - 1, 1)
    progress = min(max((step - w - 1) / horizon, 0.0), 1.0)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def global_grad_norm(grads: dict[str, np.ndarray]) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.multiply(g, g, dtype=np.float64)))
    return math.sqrt(total)


def adamw_step(params, grads, state, cfg: TrainConfig, step: int) -> float:
    """One in-place decoupled-weight-decay Adam update; returns the pre-clip
    global gradient norm."""
    norm = global_grad_norm(grads)
    scale = 1.0 if (cfg.grad_clip <= 0 or norm <= cfg.grad_clip) else cfg.grad_clip / norm
    lr = lr_at(cfg, step)
    bc1 = 1.0 - cfg.beta1**step
    bc2 = 1.0 - cfg.beta2**step
    for name, p in params.items():
        g = grads[name]
        if scale != 1.0:
            g = g * np.float32(scale)
        st = state.get(name)
        if st is None:
            st = state[name] = {"m": np.zeros_like(p), "v": np.zeros_like(p)}
        m, v = st["m"], st["v"]
        np.multiply(m, np.float32(cfg.beta1), out=m)
        m += np.float32(1 - cfg.beta1) * g
        np.multiply(v, np.float32(cfg.beta2), out=v)
        v += np.float32(1 - cfg.beta2) * (g * g)
        update = (m / np.float32(bc1)) / (np.sqrt(v / np.float32(bc2)) + np.float32(ADAM_EPS))
        p -= np.float32(lr) * (update + np.float32(cfg.weight_decay) * p)
    return norm


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def measure_activation_sparsity(model: ToyModel, ids: np.ndarray) -> list[float]:
    """Per-layer zero fraction of the activation on a dense telemetry pass."""
    probe_cfg = FfnConfig(activation="swiglu" if model.blocks[0].w3 is not None else "squared_relu")
    _, _, caches = model.forward(ids, probe_cfg)
    out = []
    for c in caches:
        if c.config.activation == "swiglu":
            act = ffn_mod.swish(c.pre_act) * c.gate
            out.append(float(np.mean(act == 0)))
        else:
            out.append(float(np.mean(c.pre_act <= 0)))
    return out


def evaluate(model: ToyModel, split: DataSplit, cfg: FfnConfig, limit: int, chunk: int = 256) -> float:
    """Mean cross-entropy over the first `limit` eval pairs (nan if empty)."""
    n = min(limit, len(split))
    n -= n % 4  # sparse forward needs token counts divisible by 4
    if n == 0:
        return float("nan")
    total = 0.0
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        logits, _, _ = model.forward(split.contexts[lo:hi], cfg)
        loss, _ = softmax_cross_entropy(logits, split.targets[lo:hi])
        total += loss * (hi - lo)
    return total / n


def train(model_cfg: ToyModelConfig, train_cfg: TrainConfig, corpus_path, grad_transform=None):
    """Run the loop; returns (metrics, model). Raises DivergenceError with the
    failing step when the loss or gradient stops being finite. Fully
    deterministic for fixed (configs, corpus, seed)."""
    fcfg = train_cfg.ffn
    sparse_any = fcfg.forward_mode != "dense"
    if sparse_any and train_cfg.batch_tokens % 4 != 0:
        raise ConfigError("sparse modes need batch_tokens divisible by 4")
    train_split, eval_split = build_dataset(corpus_path, model_cfg.context, train_cfg.split_fraction)
    if len(train_split) == 0:
        raise DataError("training split is empty")
    model = ToyModel(model_cfg, activation=fcfg.activation)
    params = model.parameters()
    state: dict = {}
    rng = np.random.Generator(np.random.PCG64(train_cfg.seed))
    telemetry = eval_split if len(eval_split) else train_split
    telem_n = min(train_cfg.eval_tokens, len(telemetry))
    telem_ids = telemetry.contexts[: max(telem_n, 1)]
    metrics: list[MetricsRecord] = []
    plans: list = [None] * model_cfg.num_blocks
    sparse_steps_done = 0

    for step in range(1, train_cfg.steps + 1):
        in_warmup = step <= train_cfg.warmup_dense_steps
        cfg_step = fcfg.densified() if in_warmup else fcfg
        if in_warmup:
            plans_in = None
        else:
            refresh = sparse_steps_done % train_cfg.plan_refresh_every == 0
            plans_in = None if refresh else plans
            sparse_steps_done += 1
        idx = rng.integers(0, len(train_split), size=train_cfg.batch_tokens)
        ids = train_split.contexts[idx]
        tgt = train_split.targets[idx]
        # overflow here is not a bug, it is the divergence condition the loss
        # and gradient checks below detect and report
        with np.errstate(over="ignore", invalid="ignore"):
            loss, grads, caches, census = model.loss_and_grads(ids, tgt, cfg_step, plans_in)
        if grad_transform is not None:
            grads = grad_transform(step, grads) or grads
        if not math.isfinite(loss):
            raise DivergenceError(step, f"non-finite loss at step {step}")
        norm = global_grad_norm(grads)
        if not math.isfinite(norm):
            raise DivergenceError(step, f"non-finite gradient at step {step}")
        adamw_step(params, grads, state, train_cfg, step)
        if not in_warmup:
            plans = [c.plan for c in caches]

        if step % train_cfg.eval_every == 0 or step == train_cfg.steps:
            eval_loss = evaluate(model, eval_split, cfg_step, train_cfg.eval_tokens)
            sparsity = measure_activation_sparsity(model, telem_ids)
            dropped = [
                c.stats.dropped_fraction_of_nonzeros if c.stats is not None else 0.0
                for c in caches
            ]
            metrics.append(
                MetricsRecord(
                    step=step,
                    train_loss=loss,
                    eval_loss=eval_loss,
                    per_layer_sparsity=sparsity,
                    per_layer_dropped_fraction=dropped,
                    macs_this_step=sum(ev.macs for ev in census),
                    gemms_dense=sum(1 for ev in census if not ev.sparse),
                    gemms_sparse=sum(1 for ev in census if ev.sparse),
                )
            )
    return metrics, model


# ---------------------------------------------------------------------------
# Ablation matrix
# ---------------------------------------------------------------------------


def swiglu_matched_hidden(h: int) -> int:
    """Parameter-matched gate width: floor(2h/3) rounded down to a multiple of 4."""
    h2 = (2 * h) // 3
    return max(h2 - h2 % 4, 4)


def _recipe(f: FfnConfig) -> FfnConfig:
    return replace(
        f,
        activation="squared_relu",
        forward_mode="sparse24",
        backward_mode="split_masked",
        mask_grad_with_fwd=True,
        permute_tokens=True,
    )


def _dense(f: FfnConfig, activation: str) -> FfnConfig:
    return replace(
        f,
        activation=activation,
        forward_mode="dense",
        backward_mode="dense",
        mask_grad_with_fwd=False,
        permute_tokens=False,
    )


ABLATION_ROWS: list[tuple[str, str]] = [
    ("dense-swiglu", "Dense training (SwiGLU)"),
    ("dense-relu2", "Dense training (Squared-ReLU)"),
    ("recipe", "2:4 recipe (5% of the features dense in BW)"),
    ("no-warmup", "2:4 - no warmup"),
    ("naive-backward", "2:4 - naively sparsify backward GEMMs"),
    ("no-permute", "2:4 - no permuting rows"),
    ("no-y1-sparsify", "2:4 - no sparsify y_1 in BW pass"),
]


def ablation_configs(model_cfg: ToyModelConfig, train_cfg: TrainConfig, key: str):
    f = train_cfg.ffn
    if key == "dense-swiglu":
        mc = replace(model_cfg, hidden=swiglu_matched_hidden(model_cfg.hidden))
        return mc, replace(train_cfg, ffn=_dense(f, "swiglu"))
    if key == "dense-relu2":
        return model_cfg, replace(train_cfg, ffn=_dense(f, "squared_relu"))
    if key == "recipe":
        return model_cfg, replace(train_cfg, ffn=_recipe(f))
    if key == "no-warmup":
        return model_cfg, replace(train_cfg, ffn=_recipe(f), warmup_dense_steps=0)
    if key == "naive-backward":
        return model_cfg, replace(train_cfg, ffn=replace(_recipe(f), backward_mode="naive_sparse"))
    if key == "no-permute":
        return model_cfg, replace(train_cfg, ffn=replace(_recipe(f), permute_tokens=False))
    if key == "no-y1-sparsify":
        return model_cfg, replace(train_cfg, ffn=replace(_recipe(f), mask_grad_with_fwd=False))
    raise ConfigError(f"unknown ablation row {key!r}")


@dataclass
class AblationResult:
    key: str
    label: str
    final_train_loss: float
    final_eval_loss: float
    diverged: bool
    divergence_step: int | None
    gemms_sparse_last_step: int


def ablate(corpus_path, model_cfg: ToyModelConfig, train_cfg: TrainConfig, rows=None):
    """Run the ablation table on shared data/seed; divergence is reported
    per-row, never fatal."""
    selected = [k for k, _ in ABLATION_ROWS] if rows is None else list(rows)
    known = dict(ABLATION_ROWS)
    results: list[AblationResult] = []
    for key in selected:
        if key not in known:
            raise ConfigError(f"unknown ablation row {key!r}")
        mc, tc = ablation_configs(model_cfg, train_cfg, key)
        try:
            metrics, _ = train(mc, tc, corpus_path)
            last = metrics[-1] if metrics else None
            results.append(
                AblationResult(
                    key=key,
                    label=known[key],
                    final_train_loss=last.train_loss if last else float("nan"),
                    final_eval_loss=last.eval_loss if last else float("nan"),
                    diverged=False,
                    divergence_step=None,
                    gemms_sparse_last_step=last.gemms_sparse if last else 0,
                )
            )
        except DivergenceError as exc:
            results.append(
                AblationResult(
                    key=key,
                    label=known[key],
                    final_train_loss=float("nan"),
                    final_eval_loss=float("nan"),
                    diverged=True,
                    divergence_step=exc.step,
                    gemms_sparse_last_step=0,
                )
            )
    return results


# ---------------------------------------------------------------------------
# Metrics / checkpoint serialization
# ---------------------------------------------------------------------------

METRICS_HEADER = "step,train_loss,eval_loss,layer,sparsity,dropped_frac,macs"


def json_safe(obj):
    """Replace non-finite floats with None so reports stay strict JSON."""
    if isinstance(obj, dict):
        return {k: json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [json_safe(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def metrics_to_csv(metrics: list[MetricsRecord]) -> str:
    lines = [METRICS_HEADER]
    for r in metrics:
        for layer, (sp, dr) in enumerate(
            zip(r.per_layer_sparsity, r.per_layer_dropped_fraction)
        ):
            lines.append(
                f"{r.step},{r.train_loss!r},{r.eval_loss!r},{layer},{sp!r},{dr!r},{r.macs_this_step}"
            )
    return "\n".join(lines) + "\n"


def summary_dict(model_cfg, train_cfg, corpus, metrics, divergence_step=None) -> dict:
    last = metrics[-1] if metrics else None
    return json_safe({
        "config": config_as_dict(model_cfg, train_cfg, corpus),
        "steps_recorded": len(metrics),
        "final_step": last.step if last else 0,
        "final_train_loss": last.train_loss if last else None,
        "final_eval_loss": last.eval_loss if last else None,
        "final_per_layer_sparsity": last.per_layer_sparsity if last else None,
        "final_per_layer_dropped_fraction": last.per_layer_dropped_fraction if last else None,
        "final_gemms_dense": last.gemms_dense if last else None,
        "final_gemms_sparse": last.gemms_sparse if last else None,
        "diverged": divergence_step is not None,
        "divergence_step": divergence_step,
    })


def save_checkpoint(out_dir, model: ToyModel, model_cfg, train_cfg, step: int, corpus=None):
    """Matrix files (one per parameter) plus a JSON manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    for name, arr in model.parameters().items():
        fname = name.replace(".", "_") + ".s24m"
        write_matrix(out / fname, arr)
        files[name] = {"file": fname, "shape": list(arr.shape)}
    manifest = {
        "step": step,
        "config": config_as_dict(model_cfg, train_cfg, corpus),
        "params": files,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
