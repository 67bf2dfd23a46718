"""Analysis tooling: latent-trace readout, KV cosine similarity, reports.

Everything here is read-only over checkpoints: model parameters and caches
are never mutated. Similarity grids are written one CSV per (head, layer)
plus an "avg" grid; decoded traces go to JSON.
"""

from __future__ import annotations

import csv
import json
import math
import os
import shutil
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, no_grad
from .data import Batch, Example, SEG_Q, SEG_SPECIAL, Vocab, VOCAB, build_batch
from .eviction import combine_and_select, score_cache
from .latent import decode_answer, jacobi_generate
from .model import Transformer

__all__ = [
    "DecodedTraceGrid",
    "SimilarityResult",
    "decode_latent_trace",
    "kv_similarity",
    "write_similarity_csvs",
    "export_reports",
    "percent_reduction",
    "top_k",
]


@dataclass
class DecodedTraceGrid:
    entries: list  # per latent position, list of (token, logit) with k items
    k: int
    answer_text: str

    def to_json(self) -> str:
        return json.dumps(
            {
                "k": self.k,
                "answer": self.answer_text,
                "positions": [
                    [{"token": t, "logit": float(l)} for t, l in pos] for pos in self.entries
                ],
            }
        )


@dataclass
class SimilarityResult:
    per_head_layer: dict  # (g, l) -> [M, N] matrix
    average: np.ndarray  # [M, N]
    kind: str  # "keys" | "values"
    target: str  # "full" | "evicted"
    zero_norm_flag: bool


def top_k(logits: np.ndarray, k: int):
    """Indices of the k largest logits, ties resolved toward lower index."""
    order = np.argsort(-logits, kind="stable")[:k]
    return order


def question_batch(question: str) -> Batch:
    """Minimal single-example batch carrying only a question prefix."""
    q_ids = VOCAB.encode(question)
    ids = np.array([[Vocab.BOS] + q_ids], dtype=np.int32)
    n_q = len(q_ids)
    return Batch(
        ids=ids,
        segments=np.array([[SEG_SPECIAL] + [SEG_Q] * n_q], dtype=np.int8),
        pad_mask=np.ones((1, 1 + n_q), dtype=bool),
        n_q=np.array([n_q]),
        n_c=np.array([0]),
        n_a=np.array([0]),
        distill_idx=np.array([n_q]),
        examples=[Example(question, [], "", "eq", -1)],
        drop_last_step=False,
    )


def decode_latent_trace(
    model: Transformer,
    question: str,
    k: int = 3,
    m_latent: int = 24,
    jacobi_iters: int = 3,
    answer_cap: int = 8,
) -> DecodedTraceGrid:
    """Project each latent position's final hidden state through the LM head."""
    batch = question_batch(question)
    with no_grad():
        state = jacobi_generate(model, batch, m_latent, jacobi_iters)
        res = decode_answer(model, batch, state, cap=answer_cap, capture_latent_hidden=True)
        entries = []
        if res.latent_hidden is not None:
            logits = model.lm_logits(Tensor(res.latent_hidden)).data[0]  # [M, V]
            for pos in range(logits.shape[0]):
                idx = top_k(logits[pos], k)
                entries.append([(VOCAB.id_to_token[int(i)], float(logits[pos, i])) for i in idx])
    return DecodedTraceGrid(entries=entries, k=k, answer_text=res.answer_text[0])


def _cosine_grid(a: np.ndarray, b: np.ndarray):
    """a [M, d], b [N, d] -> ([M, N] cosine matrix, zero-norm flag)."""
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    flag = bool((na == 0).any() or (nb == 0).any())
    dots = a @ b.T
    denom = np.outer(na, nb)
    with np.errstate(invalid="ignore", divide="ignore"):
        grid = np.where(denom > 0, dots / np.where(denom > 0, denom, 1.0), 0.0)
    return grid, flag


def kv_similarity(
    model: Transformer,
    example: Example,
    target: str = "evicted",
    kind: str = "keys",
    m_latent: int = 24,
    jacobi_iters: int = 3,
    eviction_lambda: float = 0.1,
    max_len: int = 256,
    latent_cache_override: np.ndarray | None = None,
) -> SimilarityResult:
    """Cosine similarity of the latent cache against the teacher trace cache.

    target "full" compares against all N_C trace positions; "evicted" against
    the M kept positions. Returns per-(head, layer) grids plus their average.
    """
    if target not in ("full", "evicted"):
        raise ValueError(f"target must be 'full' or 'evicted', got {target!r}")
    if kind not in ("keys", "values"):
        raise ValueError(f"kind must be 'keys' or 'values', got {kind!r}")
    batch = build_batch([example], drop_last_step=False, max_len=max_len)
    with no_grad():
        teacher = model.teacher_forward(batch, capture_attention=True)
        state = jacobi_generate(model, batch, m_latent, jacobi_iters)
        student = model.student_forward(batch, state.final_inputs, prefix=state.prefix)
        t_cache = teacher.cache_keys if kind == "keys" else teacher.cache_values
        if target == "evicted":
            scores = score_cache(
                teacher.cache_keys,
                teacher.attention,
                teacher.cache_pad,
                teacher.attention_pad_a,
                model.cfg.kv_groups,
                eviction_lambda,
            )
            comp = combine_and_select(
                scores, teacher.cache_keys, teacher.cache_values, teacher.cache_pad, m_latent
            )
            t_cache = comp.keys if kind == "keys" else comp.values
        s_cache = (
            (student.latent_keys if kind == "keys" else student.latent_values).data
            if latent_cache_override is None
            else latent_cache_override
        )

    grids, flag = {}, False
    n_groups, n_layers = model.cfg.kv_groups, model.cfg.layers
    for g in range(n_groups):
        for l in range(n_layers):
            grid, f = _cosine_grid(s_cache[0, :, g, l, :], t_cache[0, :, g, l, :])
            grids[(g, l)] = grid
            flag = flag or f
    average = np.mean([grids[k2] for k2 in grids], axis=0)
    return SimilarityResult(grids, average, kind, target, flag)


def write_similarity_csvs(result: SimilarityResult, out_dir: str) -> list[str]:
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for (g, l), grid in result.per_head_layer.items():
        path = os.path.join(out_dir, f"{result.kind}_{result.target}_h{g}_l{l}.csv")
        np.savetxt(path, grid, delimiter=",", fmt="%.6f")
        written.append(path)
    avg_path = os.path.join(out_dir, f"{result.kind}_{result.target}_avg.csv")
    np.savetxt(avg_path, result.average, delimiter=",", fmt="%.6f")
    written.append(avg_path)
    return written


def percent_reduction(latent_passes: float, full_cot_passes: float) -> int:
    """Rounded percent change of latent vs full-CoT passes, e.g. -76."""
    if full_cot_passes == 0:
        raise ValueError("full-CoT passes must be positive")
    return round((latent_passes - full_cot_passes) / full_cot_passes * 100.0)


def _stderr(values) -> float:
    if len(values) < 2:
        return 0.0
    return float(np.std(values, ddof=1) / math.sqrt(len(values)))


def export_reports(runs_root: str, out_dir: str) -> dict:
    """Assemble accuracy / forward-pass / ablation tables from run dirs.

    Each run dir must hold config.json and final_eval.json; runs missing
    either are listed as absent and the bundle is still produced. Accuracy is
    reported as mean with the standard error over seeds.
    """
    os.makedirs(out_dir, exist_ok=True)
    runs, absent = [], []
    if os.path.isdir(runs_root):
        candidates = sorted(
            d for d in os.listdir(runs_root) if os.path.isdir(os.path.join(runs_root, d))
        )
    else:
        candidates = []
    for name in candidates:
        run_dir = os.path.join(runs_root, name)
        cfg_path = os.path.join(run_dir, "config.json")
        eval_path = os.path.join(run_dir, "final_eval.json")
        if not (os.path.exists(cfg_path) and os.path.exists(eval_path)):
            absent.append(name)
            continue
        with open(cfg_path) as f:
            cfg = json.load(f)
        with open(eval_path) as f:
            final_eval = json.load(f)
        runs.append({"name": name, "dir": run_dir, "config": cfg, "eval": final_eval})

    groups: dict = {}
    for run in runs:
        label = run["config"].get("label", run["name"])
        for mode, stats in run["eval"].items():
            groups.setdefault((label, mode), []).append((run, stats))

    acc_rows, pass_rows = [], []
    full_cot_passes = [
        stats["mean_passes"] for (label, mode), items in groups.items() if mode == "full-cot"
        for _, stats in items
    ]
    full_ref = float(np.mean(full_cot_passes)) if full_cot_passes else None
    for (label, mode), items in sorted(groups.items()):
        accs = [stats["accuracy"] for _, stats in items]
        passes = [stats["mean_passes"] for _, stats in items]
        train_cfg = items[0][0]["config"].get("train", {})
        data_cfg = items[0][0]["config"].get("data", {})
        acc_rows.append(
            {
                "label": label,
                "mode": mode,
                "seeds": len(items),
                "mean_accuracy": f"{np.mean(accs):.4f}",
                "stderr": f"{_stderr(accs):.4f}",
                "alpha1": train_cfg.get("alpha1", ""),
                "alpha2": train_cfg.get("alpha2", ""),
                "lambda": train_cfg.get("eviction_lambda", ""),
                "eviction": train_cfg.get("eviction", ""),
                "drop_last_step": train_cfg.get("drop_last_step", ""),
                "style": data_cfg.get("style", ""),
            }
        )
        row = {
            "label": label,
            "mode": mode,
            "seeds": len(items),
            "mean_passes": f"{np.mean(passes):.3f}",
            "stderr": f"{_stderr(passes):.3f}",
            "pct_vs_full_cot": "",
        }
        if full_ref and mode != "full-cot":
            row["pct_vs_full_cot"] = str(percent_reduction(float(np.mean(passes)), full_ref))
        pass_rows.append(row)

    def write_table(path, rows):
        if not rows:
            with open(path, "w") as f:
                f.write("")
            return
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)

    write_table(os.path.join(out_dir, "accuracy_table.csv"), acc_rows)
    write_table(os.path.join(out_dir, "passes_table.csv"), pass_rows)

    copied = []
    for run in runs:
        sim_dir = os.path.join(run["dir"], "kv_sim")
        if os.path.isdir(sim_dir):
            dest = os.path.join(out_dir, "kv_sim", run["name"])
            os.makedirs(dest, exist_ok=True)
            for fname in sorted(os.listdir(sim_dir)):
                if fname.endswith(".csv"):
                    shutil.copyfile(os.path.join(sim_dir, fname), os.path.join(dest, fname))
                    copied.append(os.path.join(dest, fname))

    manifest = {
        "runs": [r["name"] for r in runs],
        "absent": absent,
        "tables": ["accuracy_table.csv", "passes_table.csv"],
        "similarity_files": copied,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2)
    return manifest
