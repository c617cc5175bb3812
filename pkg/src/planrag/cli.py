"""Command-line harness: index, run, sweep, compare, supervise, reward, score."""

from __future__ import annotations

import argparse
import json
import operator
import os
import random
import re
import sys

from . import bm25, records
from .control import parse_trajectory
from .generator import GeneratorError, GeneratorSettings, HttpChatGenerator, ReplayGenerator
from .metrics import (
    NormalizationMode,
    ScoreReport,
    answer_presence_at_k,
    avg_score,
    retrieval_stats,
    score_row,
)
from .planner import FallbackPolicy, PlannerConfig, batch_run, episode_record
from .reward import total_reward
from .supervision import (
    EmptyTeacherQueryError,
    Split,
    SupervisionKind,
    SupervisionSample,
    TeacherFailureError,
    build_sample,
    classify,
    export_dataset,
    probe_parametric,
    probe_retrieval,
    teacher_followup_query,
)

DEFAULTS = {
    "budget": 3,
    "top_k": 3,
    "normalization": "squad",
    "parallelism": 1,
    "seed": 0,
    "fallback": "append",
    "attempts": 3,
    "split": "sft",
    "k1": 1.2,
    "b": 0.75,
    "temperature": 0.0,
    "max_tokens": 512,
    "auth_env": "PLANRAG_API_KEY",
}


class CliError(Exception):
    pass


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    with open(path, encoding="utf-8") as fh:
        config = json.load(fh)
    if not isinstance(config, dict):
        raise CliError(f"{path}: config must be a flat JSON object")
    return config


def _resolve(args, config: dict, key: str):
    """Precedence: command-line flag, then config file, then built-in default."""
    value = getattr(args, key, None)
    if value is not None:
        return value
    if key in config:
        return config[key]
    return DEFAULTS.get(key)


def _mode(args, config) -> NormalizationMode:
    name = _resolve(args, config, "normalization")
    try:
        return NormalizationMode(name)
    except ValueError:
        raise CliError(f"unknown normalization mode: {name}") from None


def _planner_config(args, config) -> PlannerConfig:
    policy = {
        "append": FallbackPolicy.APPEND_FALLBACK_MESSAGE,
        "finalize": FallbackPolicy.FORCE_FINALIZE,
    }.get(_resolve(args, config, "fallback"))
    if policy is None:
        raise CliError("fallback must be 'append' or 'finalize'")
    return PlannerConfig(
        max_rounds=int(_resolve(args, config, "budget")),
        top_k=int(_resolve(args, config, "top_k")),
        fallback_policy=policy,
    )


def _generator_factory(rows: list[dict], args, config):
    """Replay scripts when given, otherwise a shared chat backend."""
    scripts_path = _resolve(args, config, "scripts")
    if scripts_path:
        scripts = {}
        for rec in records.read_jsonl(scripts_path):
            scripts[str(rec.get("id"))] = rec.get("turns", [])
        missing = [row["id"] for row in rows if row["id"] not in scripts]
        if missing:
            raise CliError(f"no replay script for ids: {', '.join(missing[:5])}")
        return lambda i: ReplayGenerator(scripts[rows[i]["id"]])
    endpoint = config.get("endpoint")
    model = config.get("model")
    if not endpoint or not model:
        raise CliError("need --scripts for replay, or endpoint+model in --config")
    shared = HttpChatGenerator(
        GeneratorSettings(
            endpoint=endpoint,
            model=model,
            temperature=float(_resolve(args, config, "temperature")),
            max_tokens=int(_resolve(args, config, "max_tokens")),
            auth_env=str(_resolve(args, config, "auth_env")),
        )
    )
    return lambda i: shared


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, ensure_ascii=False)
        fh.write("\n")


def _empty_report(mode: NormalizationMode) -> dict:
    return {
        "normalization": mode.value,
        "rows": [],
        "avg_score": None,
        "retrieval_stats": {},
        "presence_at_k": {},
    }


def _run_once(rows, idx, factory, cfg, mode, name, parallelism, out_dir, timings):
    os.makedirs(out_dir, exist_ok=True)
    episodes = batch_run([r["question"] for r in rows], cfg, factory, idx, parallelism)
    lines = [
        episode_record(ep, row["id"], include_timings=timings)
        for row, ep in zip(rows, episodes)
    ]
    records.write_jsonl(os.path.join(out_dir, "transcripts.jsonl"), lines)
    if rows:
        row = score_row(
            name, [ep.final_answer for ep in episodes], [r["answers"] for r in rows], mode
        )
        n = len(episodes)
        report = ScoreReport(
            rows=[row],
            avg_score=avg_score([row]),
            retrieval_stats={name: retrieval_stats(episodes)},
            presence_at_k={
                k: sum(
                    answer_presence_at_k(ep, r["answers"], k, mode)
                    for ep, r in zip(episodes, rows)
                )
                / n
                for k in (1, 3)
            },
            normalization=mode.value,
        )
        report_dict = report.to_dict()
        table = report.render_table()
    else:
        report_dict = _empty_report(mode)
        table = "Dataset  EM  ROUGE  F1\n(no rows)\n"
    run_info = {
        "dataset": name,
        "budget": cfg.max_rounds,
        "top_k": cfg.top_k,
        "normalization": mode.value,
    }
    _write_json(os.path.join(out_dir, "report.json"), {"run": run_info, "report": report_dict})
    with open(os.path.join(out_dir, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(table)
    return episodes, report_dict, table


def cmd_index(args) -> int:
    config = _load_config(args.config)
    passages = bm25.load_corpus(args.corpus)
    index = bm25.build_index(
        passages, k1=float(_resolve(args, config, "k1")), b=float(_resolve(args, config, "b"))
    )
    bm25.save_index(index, args.out)
    print(
        json.dumps(
            {"doc_count": index.doc_count, "avg_doc_length": index.avg_doc_length}
        )
    )
    return 0


def cmd_run(args) -> int:
    config = _load_config(args.config)
    random.seed(int(_resolve(args, config, "seed")))
    rows = records.load_dataset(args.dataset)
    idx = bm25.load_index(args.index) if args.index else None
    cfg = _planner_config(args, config)
    mode = _mode(args, config)
    factory = _generator_factory(rows, args, config)
    name = args.name or os.path.splitext(os.path.basename(args.dataset))[0]
    parallelism = int(_resolve(args, config, "parallelism"))
    episodes, _, table = _run_once(
        rows, idx, factory, cfg, mode, name, parallelism, args.out_dir, args.timings
    )
    print(table, end="")
    failed = [ep for ep in episodes if ep.status != "completed"]
    if failed:
        print(f"{len(failed)} episode(s) did not complete cleanly", file=sys.stderr)
        return 1
    return 0


def cmd_sweep(args) -> int:
    config = _load_config(args.config)
    random.seed(int(_resolve(args, config, "seed")))
    try:
        budgets = [int(b) for b in args.budgets.split(",") if b.strip()]
    except ValueError:
        raise CliError(f"bad budget list: {args.budgets}") from None
    if not budgets:
        raise CliError("at least one budget is required")
    rows = records.load_dataset(args.dataset)
    idx = bm25.load_index(args.index) if args.index else None
    mode = _mode(args, config)
    name = args.name or os.path.splitext(os.path.basename(args.dataset))[0]
    parallelism = int(_resolve(args, config, "parallelism"))
    base_cfg = _planner_config(args, config)
    os.makedirs(args.out_dir, exist_ok=True)
    sweep_rows = []
    exit_code = 0
    for budget in budgets:
        cfg = PlannerConfig(
            max_rounds=budget,
            top_k=base_cfg.top_k,
            fallback_policy=base_cfg.fallback_policy,
        )
        factory = _generator_factory(rows, args, config)
        sub_dir = os.path.join(args.out_dir, f"b{budget}")
        episodes, report_dict, _ = _run_once(
            rows, idx, factory, cfg, mode, name, parallelism, sub_dir, args.timings
        )
        stats = report_dict["retrieval_stats"].get(name, {"mean": 0.0, "distribution": {}})
        sweep_rows.append(
            {
                "budget": budget,
                "mean_count": stats["mean"],
                "avg_score": report_dict["avg_score"],
                "distribution": {str(k): v for k, v in stats["distribution"].items()},
            }
        )
        if any(ep.status != "completed" for ep in episodes):
            exit_code = 1
    _write_json(os.path.join(args.out_dir, "sweep.json"), {"dataset": name, "budgets": sweep_rows})
    lines = [f"{'Budget':>6}  {'Avg.Count':>9}  {'Avg.Score':>9}"]
    for r in sweep_rows:
        score = "-" if r["avg_score"] is None else f"{100 * r['avg_score']:.1f}"
        lines.append(f"{r['budget']:>6}  {r['mean_count']:>9.2f}  {score:>9}")
    lines.append("")
    lines.append("Retrieval-count distribution per budget:")
    for r in sweep_rows:
        dist = " ".join(f"{k}:{v:.2f}" for k, v in r["distribution"].items())
        lines.append(f"B={r['budget']}  {dist}")
    table = "\n".join(lines) + "\n"
    with open(os.path.join(args.out_dir, "sweep.txt"), "w", encoding="utf-8") as fh:
        fh.write(table)
    print(table, end="")
    return exit_code


_ATOM_RE = re.compile(r"^\s*([ab])\s*(==|!=|<=|>=|<|>)\s*(\d+)\s*$")
_OPS = {
    "==": operator.eq,
    "!=": operator.ne,
    "<=": operator.le,
    ">=": operator.ge,
    "<": operator.lt,
    ">": operator.gt,
}


def parse_subset_spec(spec: str) -> list[tuple[str, str, int]]:
    """Conjunction of comparisons on the two sides' retrieval counts.

    Example: "a>=1,b==0" keeps pairs where side A retrieved at least once
    while side B answered without retrieval.
    """
    atoms = []
    for part in spec.split(","):
        m = _ATOM_RE.match(part)
        if not m:
            raise CliError(f"bad subset atom: {part!r} (expected e.g. a>=1)")
        atoms.append((m.group(1), m.group(2), int(m.group(3))))
    if not atoms:
        raise CliError("empty subset spec")
    return atoms


def _subset_match(atoms, rounds_a: int, rounds_b: int) -> bool:
    values = {"a": rounds_a, "b": rounds_b}
    return all(_OPS[op](values[var], n) for var, op, n in atoms)


def cmd_compare(args) -> int:
    config = _load_config(args.config)
    mode = _mode(args, config)
    atoms = parse_subset_spec(args.subset)
    side_a = {r["id"]: r for r in records.read_jsonl(args.a)}
    side_b = {r["id"]: r for r in records.read_jsonl(args.b)}
    if set(side_a) != set(side_b):
        only_a = sorted(set(side_a) - set(side_b))[:5]
        only_b = sorted(set(side_b) - set(side_a))[:5]
        raise CliError(f"transcript id mismatch (only in A: {only_a}, only in B: {only_b})")
    refs = {r["id"]: r["answers"] for r in records.load_dataset(args.dataset)}
    missing = sorted(set(side_a) - set(refs))
    if missing:
        raise CliError(f"no references for transcript ids: {missing[:5]}")
    ids = sorted(side_a)
    matched = [
        qid
        for qid in ids
        if _subset_match(atoms, side_a[qid]["rounds_used"], side_b[qid]["rounds_used"])
    ]
    fraction = len(matched) / len(ids) if ids else 0.0
    result = {
        "subset": args.subset,
        "total": len(ids),
        "matched": len(matched),
        "fraction": fraction,
    }
    lines = [f"subset {args.subset}: {len(matched)}/{len(ids)} pairs ({100 * fraction:.1f}%)"]
    if matched:
        for label, side in (("A", side_a), ("B", side_b)):
            row = score_row(
                label,
                [side[qid]["final_answer"] for qid in matched],
                [refs[qid] for qid in matched],
                mode,
            )
            result[label] = {"em": row.em, "rouge": row.rouge_avg, "f1": row.f1}
            lines.append(
                f"{label}: EM {100 * row.em:.1f}  ROUGE {100 * row.rouge_avg:.1f}  "
                f"F1 {100 * row.f1:.1f}"
            )
    else:
        result["A"] = result["B"] = None
        lines.append("empty subset: no metric rows")
    text = "\n".join(lines) + "\n"
    if args.out:
        _write_json(args.out, result)
    print(text, end="")
    return 0


def _probe_scripts(path: str | None, rows: list[dict]) -> dict | None:
    if not path:
        return None
    scripts = {str(r.get("id")): r for r in records.read_jsonl(path)}
    missing = [row["id"] for row in rows if row["id"] not in scripts]
    if missing:
        raise CliError(f"no probe script for ids: {', '.join(missing[:5])}")
    return scripts


def cmd_supervise(args) -> int:
    config = _load_config(args.config)
    random.seed(int(_resolve(args, config, "seed")))
    rows = records.load_dataset(args.questions)
    idx = bm25.load_index(args.index) if args.index else None
    mode = _mode(args, config)
    attempts_n = int(_resolve(args, config, "attempts"))
    top_k = int(_resolve(args, config, "top_k"))
    split = Split(_resolve(args, config, "split"))
    scripts = _probe_scripts(_resolve(args, config, "scripts"), rows)
    shared_gen = shared_teacher = None
    if scripts is None:
        endpoint, model = config.get("endpoint"), config.get("model")
        if not endpoint or not model:
            raise CliError("need --scripts for replay, or endpoint+model in --config")
        shared_gen = HttpChatGenerator(GeneratorSettings(endpoint=endpoint, model=model))
        t_endpoint = config.get("teacher_endpoint", endpoint)
        t_model = config.get("teacher_model", model)
        shared_teacher = HttpChatGenerator(
            GeneratorSettings(endpoint=t_endpoint, model=t_model)
        )
    samples = []
    skipped = []
    for row in rows:
        if scripts is not None:
            gen = ReplayGenerator(scripts[row["id"]].get("probe_turns", []))
            teacher = ReplayGenerator(scripts[row["id"]].get("teacher_turns", []))
        else:
            gen, teacher = shared_gen, shared_teacher
        parametric = probe_parametric(row["question"], row["answers"], gen, attempts_n, mode)
        retrieval = probe_retrieval(row["question"], row["answers"], gen, idx, top_k, mode)
        kind = classify(parametric, retrieval)
        teacher_query = None
        if kind is SupervisionKind.GAMMA:
            hits = idx.search(row["question"], top_k) if idx is not None else []
            try:
                teacher_query = teacher_followup_query(
                    row["question"],
                    retrieval.attempts[0].answer,
                    [h.passage for h in hits],
                    teacher,
                )
            except (TeacherFailureError, EmptyTeacherQueryError) as exc:
                skipped.append(row["id"])
                print(f"skipping {row['id']}: {exc}", file=sys.stderr)
                continue
        samples.append(
            build_sample(
                row["question"],
                row["answers"],
                kind,
                parametric,
                retrieval,
                teacher_query,
                qid=row["id"],
            )
        )
    os.makedirs(args.out_dir, exist_ok=True)
    out_path = os.path.join(args.out_dir, f"{split.value}.jsonl")
    written = export_dataset(samples, split, out_path)
    counts = {k.value: 0 for k in SupervisionKind}
    for s in samples:
        counts[s.kind.value] += 1
    summary = {"written": written, "skipped": len(skipped), "counts": counts}
    print(json.dumps(summary))
    return 0


def cmd_reward(args) -> int:
    config = _load_config(args.config)
    budget = int(_resolve(args, config, "budget"))
    sample_by_id = {}
    for rec in records.read_jsonl(args.samples):
        sample_by_id[str(rec["id"])] = SupervisionSample(
            qid=str(rec["id"]),
            question=rec.get("question", ""),
            references=rec.get("references", []),
            kind=SupervisionKind(rec.get("kind", "alpha")),
            target=parse_trajectory(rec.get("target", "")),
        )
    entries = []
    errors = 0
    with open(args.rollouts, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                qid = str(rec["id"])
                text = rec["text"]
            except (json.JSONDecodeError, KeyError, TypeError):
                entries.append({"line": lineno, "error": "malformed rollout record"})
                errors += 1
                continue
            sample = sample_by_id.get(qid)
            if sample is None:
                entries.append({"id": qid, "error": "no matching sample id"})
                errors += 1
                continue
            try:
                breakdown = total_reward(parse_trajectory(text), sample, budget)
            except ValueError as exc:
                entries.append({"id": qid, "error": str(exc)})
                errors += 1
                continue
            entries.append(
                {
                    "id": qid,
                    "r_ans": breakdown.r_ans,
                    "r_ctrl": breakdown.r_ctrl,
                    "total": breakdown.total,
                }
            )
    records.write_jsonl(args.out, entries)
    print(f"wrote {len(entries)} reward records ({errors} errors)")
    return 1 if errors else 0


def cmd_score(args) -> int:
    config = _load_config(args.config)
    mode = _mode(args, config)
    rows = records.load_dataset(args.dataset)
    preds = {str(r["id"]): r.get("prediction", "") for r in records.read_jsonl(args.predictions)}
    missing = [r["id"] for r in rows if r["id"] not in preds]
    if missing:
        raise CliError(f"predictions missing for ids: {', '.join(missing[:5])}")
    name = args.name or os.path.splitext(os.path.basename(args.dataset))[0]
    if rows:
        row = score_row(name, [preds[r["id"]] for r in rows], [r["answers"] for r in rows], mode)
        report = ScoreReport(rows=[row], avg_score=avg_score([row]), normalization=mode.value)
        payload = report.to_dict()
        table = report.render_table()
    else:
        payload = _empty_report(mode)
        table = "Dataset  EM  ROUGE  F1\n(no rows)\n"
    if args.out_dir:
        os.makedirs(args.out_dir, exist_ok=True)
        _write_json(os.path.join(args.out_dir, "report.json"), payload)
        with open(os.path.join(args.out_dir, "report.txt"), "w", encoding="utf-8") as fh:
            fh.write(table)
    print(table, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="planrag",
        description="Control-token retrieval planning: indexing, runs, scoring.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat JSON config file")
        p.add_argument("--normalization", choices=["squad", "minimal"])
        p.add_argument("--seed", type=int)

    p = sub.add_parser("index", help="build and save a passage index")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k1", type=float)
    p.add_argument("--b", type=float)
    p.add_argument("--config")
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("run", help="run planning episodes over a dataset")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--index")
    p.add_argument("--scripts", help="replay scripts file (one {id, turns} per line)")
    p.add_argument("--budget", type=int)
    p.add_argument("--top-k", dest="top_k", type=int)
    p.add_argument("--parallelism", type=int)
    p.add_argument("--fallback", choices=["append", "finalize"])
    p.add_argument("--name")
    p.add_argument("--timings", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="repeat a run across retrieval budgets")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--budgets", required=True, help="comma-separated, e.g. 3,5,7,10")
    p.add_argument("--index")
    p.add_argument("--scripts")
    p.add_argument("--top-k", dest="top_k", type=int)
    p.add_argument("--parallelism", type=int)
    p.add_argument("--fallback", choices=["append", "finalize"])
    p.add_argument("--name")
    p.add_argument("--timings", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("compare", help="score two transcript files on a subset")
    common(p)
    p.add_argument("--a", required=True, help="transcripts for side A")
    p.add_argument("--b", required=True, help="transcripts for side B")
    p.add_argument("--dataset", required=True)
    p.add_argument("--subset", required=True, help='e.g. "a>=1,b==0"')
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("supervise", help="build structured supervision samples")
    common(p)
    p.add_argument("--questions", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--index")
    p.add_argument("--scripts", help="probe scripts: {id, probe_turns, teacher_turns}")
    p.add_argument("--attempts", type=int)
    p.add_argument("--top-k", dest="top_k", type=int)
    p.add_argument("--split", choices=["sft", "rl"])
    p.set_defaults(func=cmd_supervise)

    p = sub.add_parser("reward", help="score rollouts against supervision samples")
    p.add_argument("--rollouts", required=True)
    p.add_argument("--samples", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--budget", type=int)
    p.add_argument("--config")
    p.set_defaults(func=cmd_reward)

    p = sub.add_parser("score", help="score a predictions file against references")
    common(p)
    p.add_argument("--predictions", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--name")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_score)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CliError, GeneratorError, OSError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
