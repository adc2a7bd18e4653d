"""Synthetic multi-task suite: generation, toy LoRA fine-tuning, evaluation.

Each task is a Gaussian-mixture classification problem over inputs x in R^m.
The model is a single adapted linear feature map followed by a frozen per-task
head: logits = H_i @ ((W0 + dW) @ x). Class means live mostly in the
orthogonal complement of the low-rank base map's row space, so the base model
scores near chance and fine-tuned adapters recover the missing directions —
leaving measurable headroom for merging methods.

All gradients through the entropy and cross-entropy losses are analytic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .adapters import AdapterCollection, LoraAdapter, save_collection, load_collection
from .rng import substream

LAYER_ID = "layer0"


class HarnessError(ValueError):
    pass


@dataclass(frozen=True)
class SuiteConfig:
    n_tasks: int = 4
    d: int = 32                # feature dimension
    m: int = 24                # input dimension
    n_classes: int = 5
    n_train: int = 400
    n_eval: int = 200
    n_adapt: int = 200
    base_rank: int = 3
    mean_scale: float = 3.0
    leak_scale: float = 0.2    # class-mean component inside the base row space
    noise_std: float = 0.55
    seed: int = 0
    label_offsets: tuple | None = None  # global label id of class 0 per task

    def __post_init__(self):
        for name in ("n_tasks", "d", "m", "n_classes", "n_train", "n_eval", "n_adapt"):
            if getattr(self, name) < 1:
                raise HarnessError(f"{name} must be positive")


@dataclass
class TaskData:
    train_x: np.ndarray
    train_y: np.ndarray
    eval_x: np.ndarray
    eval_y: np.ndarray
    adapt_x: np.ndarray
    labels: np.ndarray      # global label ids, one per local class


@dataclass
class EvalReport:
    task_ids: list[str]
    absolute: list[float]
    normalized: list[float]
    avg_absolute: float
    avg_normalized: float
    hits_at: dict[int, float] | None = None
    seen: dict | None = None

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class TaskSuite:
    config: SuiteConfig
    base: dict[str, np.ndarray]           # {LAYER_ID: W0}
    tasks: list[TaskData]
    heads: list[np.ndarray | None] = field(default_factory=list)
    references: list[float | None] = field(default_factory=list)

    @property
    def n_tasks(self) -> int:
        return self.config.n_tasks

    def adaptation_pool(self, task: int) -> np.ndarray:
        return self.tasks[task].adapt_x

    def _logits(self, task: int, weights: dict, x: np.ndarray) -> np.ndarray:
        if self.heads[task] is None:
            raise HarnessError(f"task {task} has no trained head")
        return x @ weights[LAYER_ID].T @ self.heads[task].T

    def entropy_and_grad(self, task: int, weights: dict, batch: np.ndarray):
        """Mean predictive entropy on a batch and its gradient w.r.t. W."""
        w = weights[LAYER_ID]
        h = self.heads[task]
        z = batch @ w.T                  # (B, d)
        p = _softmax(z @ h.T)            # (B, C)
        with np.errstate(divide="ignore", invalid="ignore"):
            logp = np.where(p > 0, np.log(p), 0.0)
        ent = -np.sum(p * logp, axis=1)  # (B,)
        value = float(np.mean(ent))
        # dE/dlogit_j = -p_j (log p_j + E) per sample
        dl = -p * (logp + ent[:, None]) / batch.shape[0]
        dz = dl @ h                      # (B, d)
        return value, {LAYER_ID: dz.T @ batch}

    def task_loss_gradients(self, task: int, weights: dict) -> dict:
        """Gradient of task's label-free loss at the given weights."""
        _, grad = self.entropy_and_grad(task, weights, self.adaptation_pool(task))
        return grad

    def accuracy(self, task: int, weights: dict, split: str = "eval") -> float:
        td = self.tasks[task]
        x, y = (td.eval_x, td.eval_y) if split == "eval" else (td.train_x, td.train_y)
        pred = np.argmax(self._logits(task, weights, x), axis=1)
        return float(np.mean(pred == y))


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - np.max(z, axis=1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=1, keepdims=True)


def generate_suite(config: SuiteConfig | None = None, **overrides) -> TaskSuite:
    """Deterministic Gaussian-mixture suite; identical seed, identical suite."""
    cfg = config or SuiteConfig(**overrides)
    gen = substream(cfg.seed, "base")
    # explicit orthonormal row-space basis q so class means can be split
    # into in-row-space and complement components
    q, _ = np.linalg.qr(gen.standard_normal((cfg.m, cfg.base_rank)))  # (m, base_rank)
    w0 = gen.standard_normal((cfg.d, cfg.base_rank)) @ q.T / np.sqrt(cfg.base_rank)
    offsets = cfg.label_offsets or tuple(i * cfg.n_classes for i in range(cfg.n_tasks))
    if len(offsets) != cfg.n_tasks:
        raise HarnessError("label_offsets length must equal n_tasks")

    tasks = []
    for i in range(cfg.n_tasks):
        mgen = substream(cfg.seed, "task", i, "means")
        raw = mgen.standard_normal((cfg.n_classes, cfg.m))
        raw /= np.linalg.norm(raw, axis=1, keepdims=True)
        inside = (raw @ q) @ q.T
        means = cfg.mean_scale * (raw - inside + cfg.leak_scale * inside)

        def draw(tag, n):
            sgen = substream(cfg.seed, "task", i, tag)
            y = sgen.integers(0, cfg.n_classes, n)
            x = means[y] + cfg.noise_std * sgen.standard_normal((n, cfg.m))
            return x, y

        train_x, train_y = draw("train", cfg.n_train)
        eval_x, eval_y = draw("eval", cfg.n_eval)
        adapt_x, _ = draw("adapt", cfg.n_adapt)
        tasks.append(
            TaskData(
                train_x=train_x,
                train_y=train_y,
                eval_x=eval_x,
                eval_y=eval_y,
                adapt_x=adapt_x,
                labels=np.arange(cfg.n_classes) + offsets[i],
            )
        )
    return TaskSuite(
        config=cfg,
        base={LAYER_ID: w0},
        tasks=tasks,
        heads=[None] * cfg.n_tasks,
        references=[None] * cfg.n_tasks,
    )


def _adamw_step(params, grads, m, v, t, lr, betas=(0.9, 0.999), eps=1e-8):
    b1, b2 = betas
    for key in params:
        g = grads[key]
        m[key] = b1 * m[key] + (1 - b1) * g
        v[key] = b2 * v[key] + (1 - b2) * g * g
        params[key] = params[key] - lr * (
            (m[key] / (1 - b1**t)) / (np.sqrt(v[key] / (1 - b2**t)) + eps)
        )


def finetune_lora(
    suite: TaskSuite,
    task: int,
    rank: int = 16,
    steps: int = 300,
    lr: float = 0.02,
    seed: int = 0,
    lora_alpha: float = 16.0,
    batch_size: int = 32,
) -> LoraAdapter:
    """Train (B, A, head) by cross-entropy; stores the head and the fine-tuned
    eval accuracy on the suite as the normalization reference."""
    cfg = suite.config
    if rank > min(cfg.d, cfg.m):
        raise HarnessError(f"rank {rank} exceeds min(d, m) = {min(cfg.d, cfg.m)}")
    w0 = suite.base[LAYER_ID]
    scale = lora_alpha / rank
    init = substream(seed, "finetune", task)
    params = {
        "b": np.zeros((cfg.d, rank)),
        "a": 0.01 * init.standard_normal((cfg.m, rank)),
        "h": 0.01 * init.standard_normal((cfg.n_classes, cfg.d)),
    }
    m = {k: np.zeros_like(p) for k, p in params.items()}
    v = {k: np.zeros_like(p) for k, p in params.items()}
    td = suite.tasks[task]
    initial_loss = None
    for t in range(steps):
        idx = substream(seed, "finetune", task, "batch", t).integers(
            0, cfg.n_train, batch_size
        )
        x, y = td.train_x[idx], td.train_y[idx]
        w = w0 + scale * params["b"] @ params["a"].T
        z = x @ w.T
        p = _softmax(z @ params["h"].T)
        loss = float(np.mean(-np.log(np.maximum(p[np.arange(len(y)), y], 1e-300))))
        if initial_loss is None:
            initial_loss = max(loss, 1e-12)
        elif loss > 10.0 * initial_loss:
            raise HarnessError(
                f"divergence guard: loss {loss:.4g} exceeds 10x initial at step {t}"
            )
        dl = p.copy()
        dl[np.arange(len(y)), y] -= 1.0
        dl /= len(y)
        dz = dl @ params["h"]
        dw = dz.T @ x
        grads = {
            "b": scale * dw @ params["a"],
            "a": scale * dw.T @ params["b"],
            "h": dl.T @ z,
        }
        _adamw_step(params, grads, m, v, t + 1, lr)

    suite.heads[task] = params["h"]
    adapter = LoraAdapter(
        task_id=f"task{task}",
        layer_id=LAYER_ID,
        b=params["b"],
        a=params["a"],
        rank=rank,
        lora_alpha=lora_alpha,
    )
    weights = {LAYER_ID: w0 + scale * params["b"] @ params["a"].T}
    suite.references[task] = suite.accuracy(task, weights)
    return adapter


def finetune_all(suite: TaskSuite, rank: int = 16, steps: int = 300, lr: float = 0.02,
                 seed: int = 0, lora_alpha: float = 16.0) -> AdapterCollection:
    adapters = [
        finetune_lora(suite, i, rank=rank, steps=steps, lr=lr, seed=seed,
                      lora_alpha=lora_alpha)
        for i in range(suite.n_tasks)
    ]
    return AdapterCollection(
        layer_ids=[LAYER_ID],
        task_ids=[ad.task_id for ad in adapters],
        base=dict(suite.base),
        adapters={LAYER_ID: adapters},
    )


def evaluate(weights: dict, suite: TaskSuite, subset: list[int] | None = None) -> EvalReport:
    """Per-task accuracy under each task's own head, normalized by the stored
    fine-tuned references."""
    idx = list(range(suite.n_tasks)) if subset is None else list(subset)
    absolute, normalized = [], []
    for i in idx:
        if suite.references[i] is None:
            raise HarnessError(f"task {i} has no fine-tuned reference accuracy")
        acc = suite.accuracy(i, weights)
        absolute.append(acc)
        normalized.append(acc / suite.references[i])
    return EvalReport(
        task_ids=[f"task{i}" for i in idx],
        absolute=absolute,
        normalized=normalized,
        avg_absolute=float(np.mean(absolute)),
        avg_normalized=float(np.mean(normalized)),
    )


def evaluate_joint(weights: dict, suite: TaskSuite, ks=(1, 3, 5)) -> dict[int, float]:
    """Hits@k over the union label space.

    Each eval sample is scored by every task head; columns sharing a global
    label id are merged by max logit. Hits@k is the fraction of samples whose
    true global label ranks in the top k.
    """
    all_labels = np.concatenate([td.labels for td in suite.tasks])
    union = np.unique(all_labels)
    if max(ks) > union.size:
        raise HarnessError(f"k={max(ks)} exceeds union label count {union.size}")
    col_of = {lab: j for j, lab in enumerate(union)}

    hits = {k: 0 for k in ks}
    total = 0
    for i, td in enumerate(suite.tasks):
        n = td.eval_x.shape[0]
        scores = np.full((n, union.size), -np.inf)
        for j in range(suite.n_tasks):
            logits = suite._logits(j, weights, td.eval_x)
            for c, lab in enumerate(suite.tasks[j].labels):
                col = col_of[lab]
                scores[:, col] = np.maximum(scores[:, col], logits[:, c])
        true_cols = np.array([col_of[lab] for lab in td.labels])[td.eval_y]
        order = np.argsort(-scores, axis=1, kind="stable")
        for k in ks:
            hits[k] += int(np.sum(np.any(order[:, :k] == true_cols[:, None], axis=1)))
        total += n
    return {k: hits[k] / total for k in ks}


def sweep_preferences(coll, suite, preferences, merge_fn):
    """One merge + evaluation per preference vector.

    merge_fn(coll, suite, rho) -> merged weights dict; results keep the input
    preference order.
    """
    if not preferences:
        raise HarnessError("preference list is empty")
    results = []
    for rho in preferences:
        weights = merge_fn(coll, suite, np.asarray(rho, dtype=np.float64))
        results.append((np.asarray(rho, dtype=np.float64), evaluate(weights, suite)))
    return results


def unseen_split_eval(coll, suite, seen: list[str], merge_fn) -> EvalReport:
    """Merge only the seen tasks' adapters, then evaluate every task."""
    if not seen:
        raise HarnessError("seen task set is empty")
    sub = coll.subset(seen)
    weights = merge_fn(sub, suite)
    report = evaluate(weights, suite)
    seen_idx = [coll.task_ids.index(t) for t in seen]
    unseen_idx = [i for i in range(suite.n_tasks) if i not in seen_idx]
    report.seen = {
        "seen_tasks": seen,
        "seen_avg_normalized": float(
            np.mean([report.normalized[i] for i in seen_idx])
        ),
        "unseen_tasks": [coll.task_ids[i] for i in unseen_idx],
        "unseen_avg_normalized": (
            float(np.mean([report.normalized[i] for i in unseen_idx]))
            if unseen_idx
            else None
        ),
        "combined_avg_normalized": report.avg_normalized,
    }
    return report


def save_suite(suite: TaskSuite, coll: AdapterCollection, container_path, sidecar_path):
    """LMK1 container for base + adapters; JSON sidecar for config, heads, data."""
    save_collection(coll, container_path)
    doc = {
        "config": asdict(suite.config),
        "heads": [None if h is None else h.tolist() for h in suite.heads],
        "references": suite.references,
        "tasks": [
            {
                "train_x": td.train_x.tolist(),
                "train_y": td.train_y.tolist(),
                "eval_x": td.eval_x.tolist(),
                "eval_y": td.eval_y.tolist(),
                "adapt_x": td.adapt_x.tolist(),
                "labels": td.labels.tolist(),
            }
            for td in suite.tasks
        ],
    }
    with open(sidecar_path, "w") as fh:
        json.dump(doc, fh)


def load_suite(container_path, sidecar_path):
    """Inverse of save_suite; returns (suite, collection)."""
    coll = load_collection(container_path)
    with open(sidecar_path) as fh:
        doc = json.load(fh)
    raw_cfg = dict(doc["config"])
    if raw_cfg.get("label_offsets") is not None:
        raw_cfg["label_offsets"] = tuple(raw_cfg["label_offsets"])
    cfg = SuiteConfig(**raw_cfg)
    tasks = [
        TaskData(
            train_x=np.array(td["train_x"]),
            train_y=np.array(td["train_y"]),
            eval_x=np.array(td["eval_x"]),
            eval_y=np.array(td["eval_y"]),
            adapt_x=np.array(td["adapt_x"]),
            labels=np.array(td["labels"]),
        )
        for td in doc["tasks"]
    ]
    suite = TaskSuite(
        config=cfg,
        base=dict(coll.base),
        tasks=tasks,
        heads=[None if h is None else np.array(h) for h in doc["heads"]],
        references=doc["references"],
    )
    return suite, coll
