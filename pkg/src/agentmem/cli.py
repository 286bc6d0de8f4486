"""Command-line benches and inspection tools.

Outputs written under --out are deterministic for a given seed and fixture
set; wall-clock latencies are printed to stdout only, never written to files
or asserted. Exit code is nonzero when any built-in check fails.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import action_memory, profile_memory
from .config import Config, fixtures_root
from .embedding import HashEmbedder, VectorIndex, top_k
from .errors import AgentMemError, MissingFixture, UnknownTemplateSet
from .experience_memory import TemplateStore, fill_parameters
from .oracles import OracleSuite
from .profile_memory import DisGraph, retrieve_profile, update_profile
from .record_replay import Memories, replay
from .scheduler import ExecutionMode, execute
from .sim_env import SimEnvironment, generate_workload, load_apps, load_scenarios
from .ui_model import StepOrigin, load_trace, token_count


class BenchCheckFailed(AgentMemError):
    pass


def _load_extractors(root: Path) -> dict:
    path = root / "oracles" / "extractors.json"
    return json.loads(path.read_text()) if path.is_file() else {}


def _suite(env: SimEnvironment | None, root: Path, rulebook: dict | None = None) -> OracleSuite:
    return OracleSuite.scripted(env=env, rulebook=rulebook, extractors=_load_extractors(root))


# -- profile benchmark -----------------------------------------------------------------


@dataclass
class ProfileBenchResult:
    alignment_graph: float
    alignment_flat: float
    per_user: dict[str, dict] = field(default_factory=dict)
    profile_checks: list[dict] = field(default_factory=list)
    learn_calls: int = 0
    observation_batches: int = 0
    split_calls: int = 0
    retrieval_calls: int = 0
    bfs_visited: list[int] = field(default_factory=list)
    write_ms: list[float] = field(default_factory=list)
    retrieve_ms: list[float] = field(default_factory=list)


def _flat_retrieve(chunks: list[tuple[str, object]], query_vec, budget: int) -> str:
    """Vanilla-RAG baseline: top text chunks by cosine until the budget fills."""
    index = VectorIndex(dim=len(query_vec))
    texts = {}
    for i, (text, vec) in enumerate(chunks):
        key = f"{i:04d}"
        index.set(key, vec)
        texts[key] = text
    picked = []
    used = 0
    for key, _ in top_k(query_vec, index, k=len(chunks)):
        cost = token_count(texts[key])
        if used + cost > budget:
            break
        picked.append(texts[key])
        used += cost
    return " ".join(picked)


def bench_profile(fixtures: Path, k: int | None = None, budget: int | None = None) -> ProfileBenchResult:
    """Three phases: learning, task rewriting, profile matching, plus the flat baseline."""
    bench_dir = fixtures / "profile_bench"
    if not bench_dir.is_dir():
        raise MissingFixture(str(bench_dir))
    cfg = json.loads((bench_dir / "config.json").read_text())
    k = k or cfg.get("k", 3)
    budget = budget or cfg.get("token_budget", 2000)
    rulebooks = json.loads((bench_dir / "rulebook.json").read_text())
    embedder = HashEmbedder()

    result = ProfileBenchResult(alignment_graph=0.0, alignment_flat=0.0)
    graph_scores: list[float] = []
    flat_scores: list[float] = []

    for user_file in sorted(bench_dir.glob("user_*.json")):
        user = json.loads(user_file.read_text())
        uid = user["user_id"]
        suite = _suite(None, fixtures, rulebook=rulebooks[uid])
        graph = DisGraph(embedder)

        # phase 1: learning, one observation batch per historical task
        calls_before = suite.log.count("profile_updater")
        for task in user["historical"]:
            t0 = time.perf_counter()
            update_profile([task], graph, suite.profile_updater,
                           update_k=cfg.get("update_k", 5), split_threshold=cfg.get("split_threshold", 20))
            result.write_ms.append((time.perf_counter() - t0) * 1000)
        learned = suite.log.count("profile_updater") - calls_before
        result.learn_calls += learned
        result.observation_batches += len(user["historical"])
        result.split_calls += max(0, learned - len(user["historical"]))

        chunks = [(text, embedder.embed(text)) for text in user["historical"]]

        user_graph_scores: list[float] = []
        user_flat_scores: list[float] = []
        for test in user["tests"]:
            task, required = test["task"], test["required"]
            # phase 2: retrieval (zero oracle calls by construction) + rewrite
            before = suite.log.count()
            t0 = time.perf_counter()
            ctx = retrieve_profile(task, graph, k=k, token_budget=budget)
            result.retrieve_ms.append((time.perf_counter() - t0) * 1000)
            result.retrieval_calls += suite.log.count() - before
            result.bfs_visited.append(ctx.bfs_visited)
            rewritten = suite.task_rewriter.rewrite(task, ctx.rendered())
            flat_ctx = _flat_retrieve(chunks, embedder.embed(task), budget)
            rewritten_flat = suite.task_rewriter.rewrite(task, flat_ctx)

            # phase 3: judging
            checks = suite.judge.check(required, rewritten)
            flat_checks = suite.judge.check(required, rewritten_flat)
            user_graph_scores.append(sum(c["matched"] for c in checks) / len(checks))
            user_flat_scores.append(sum(c["matched"] for c in flat_checks) / len(flat_checks))
            result.profile_checks.append(
                {"user": uid, "task": task, "system": "graph", "profile_check": checks}
            )
            result.profile_checks.append(
                {"user": uid, "task": task, "system": "flat", "profile_check": flat_checks}
            )

        result.per_user[uid] = {
            "alignment_graph": sum(user_graph_scores) / len(user_graph_scores),
            "alignment_flat": sum(user_flat_scores) / len(user_flat_scores),
            "nodes": graph.node_count(),
            "edges": len(graph.edges),
        }
        graph_scores.extend(user_graph_scores)
        flat_scores.extend(user_flat_scores)

    result.alignment_graph = sum(graph_scores) / len(graph_scores)
    result.alignment_flat = sum(flat_scores) / len(flat_scores)

    if result.retrieval_calls != 0:
        raise BenchCheckFailed("retrieval phase performed oracle calls")
    if result.learn_calls != result.observation_batches + result.split_calls:
        raise BenchCheckFailed("learning phase call count off")
    if result.alignment_graph < result.alignment_flat:
        raise BenchCheckFailed("graph retrieval under-performed the flat baseline")
    return result


# -- action reuse benchmark ---------------------------------------------------------------


TEMPLATE_SETS = {"none": None, "llm-style": "llm", "human-crafted": "human"}


@dataclass
class TaskRun:
    category: str
    task_text: str
    steps: int
    reused: int
    outcome: str
    signature: list[tuple[str, tuple]] = field(default_factory=list)


@dataclass
class ActionBenchResult:
    template_set: str
    runs: list[TaskRun] = field(default_factory=list)
    memories: Memories | None = None

    def persist_memory(self, out: Path) -> dict:
        """Dump the warmed caches and report their footprint (never asserted)."""
        cached_actions = 0
        total_bytes = 0
        for app_id, tree in sorted(self.memories.acttrees.items()):
            path = out / "acttree" / f"{app_id}.json"
            action_memory.save_acttree(tree, path)
            cached_actions += tree.edge_count()
            total_bytes += path.stat().st_size
        for template_id, chain in sorted(self.memories.actchains.items()):
            path = out / "actchain" / f"{template_id}.json"
            action_memory.save_actchain(chain, path)
            cached_actions += chain.variant_count()
            total_bytes += path.stat().st_size
        return {"cached_actions": cached_actions, "bytes": total_bytes}

    def per_category(self) -> dict[str, dict]:
        out: dict[str, dict] = {}
        for run in self.runs:
            row = out.setdefault(run.category, {"tasks": 0, "steps": 0, "reused": 0, "failures": 0})
            row["tasks"] += 1
            row["steps"] += run.steps
            row["reused"] += run.reused
            row["failures"] += run.outcome != "success"
        for row in out.values():
            row["reuse_rate"] = row["reused"] / row["steps"] if row["steps"] else 0.0
        return out

    @property
    def average_reuse(self) -> float:
        steps = sum(r.steps for r in self.runs)
        return sum(r.reused for r in self.runs) / steps if steps else 0.0


def build_workload(fixtures: Path, seed: int | None = None) -> list:
    spec = json.loads((fixtures / "workloads" / "actions_454.json").read_text())
    seed = seed if seed is not None else spec["seed"]
    categories = json.loads((fixtures / "workloads" / "categories.json").read_text())
    per_cat = {name: generate_workload(name, count, seed, categories) for name, count in spec["counts"].items()}
    # interleave round-robin so every category warms up gradually
    tasks = []
    queues = {name: list(items) for name, items in sorted(per_cat.items())}
    while any(queues.values()):
        for name in sorted(queues):
            if queues[name]:
                tasks.append(queues[name].pop(0))
    return tasks


def bench_actions(fixtures: Path, template_set: str, seed: int | None = None,
                  config: Config | None = None) -> ActionBenchResult:
    if template_set not in TEMPLATE_SETS:
        raise UnknownTemplateSet(template_set)
    config = config or Config()
    apps = load_apps(fixtures / "apps")
    env = SimEnvironment(apps)
    suite = _suite(env, fixtures)
    store = TemplateStore()
    set_dir = TEMPLATE_SETS[template_set]
    if set_dir:
        store.load_dir(fixtures / "templates" / set_dir)
    memories = Memories(templates=store)

    result = ActionBenchResult(template_set=template_set)
    result.memories = memories
    for task in build_workload(fixtures, seed):
        run = replay(task.task_text, memories, env, suite, config=config)
        reused = sum(
            1 for o in run.trace.annotations
            if o in (StepOrigin.ACTTREE_REUSE, StepOrigin.ACTCHAIN_REUSE)
        )
        result.runs.append(
            TaskRun(
                category=task.category,
                task_text=task.task_text,
                steps=len(run.trace.steps),
                reused=reused,
                outcome=run.trace.outcome.value,
                signature=[(s.fingerprint, a.identity()) for s, a in run.trace.steps],
            )
        )
    failures = [r for r in result.runs if r.outcome != "success"]
    if failures:
        raise BenchCheckFailed(f"{len(failures)} workload tasks failed, first: {failures[0].task_text!r}")
    return result


def bench_actions_compare(fixtures: Path, seed: int | None = None,
                          config: Config | None = None) -> dict[str, ActionBenchResult]:
    results = {name: bench_actions(fixtures, name, seed, config) for name in ("none", "llm-style", "human-crafted")}
    if not (results["human-crafted"].average_reuse > results["llm-style"].average_reuse
            > results["none"].average_reuse):
        raise BenchCheckFailed(
            "expected human-crafted > llm-style > ActTree-only, got "
            + ", ".join(f"{k}={v.average_reuse:.3f}" for k, v in results.items())
        )
    return results


# -- scheduling benchmark --------------------------------------------------------------------


@dataclass
class ScheduleBenchResult:
    rows: list[dict] = field(default_factory=list)  # scenario, mode totals, speedups
    timelines: dict[str, str] = field(default_factory=dict)  # "scenario/mode" -> csv


def bench_schedule(fixtures: Path, modes: list[ExecutionMode] | None = None) -> ScheduleBenchResult:
    modes = modes or list(ExecutionMode)
    apps = load_apps(fixtures / "apps")
    store = TemplateStore()
    store.load_dir(fixtures / "templates" / "flows")
    result = ScheduleBenchResult()
    for scenario in load_scenarios(fixtures / "scenarios"):
        env = SimEnvironment(apps)
        suite = _suite(env, fixtures)
        totals: dict[str, list[int]] = {m.value: [] for m in modes}
        for params in scenario.instantiate():
            task = scenario.task_template
            for key, value in params.items():
                task = task.replace("{" + key + "}", value)
            plan = fill_parameters(store.get(scenario.template_id), task, suite.task_rewriter, store=store)
            for mode in modes:
                report = execute(plan, mode, env, Memories(templates=store), suite)
                if report.failed:
                    raise BenchCheckFailed(f"{scenario.name}/{mode.value}: subtasks failed: {report.failed}")
                totals[mode.value].append(report.timeline.t_total)
                key = f"{scenario.name}/{mode.value}"
                if key not in result.timelines:
                    result.timelines[key] = report.timeline.to_csv()
        fixed = {m: sorted(set(v)) for m, v in totals.items()}
        for mode_name, values in fixed.items():
            if len(values) != 1:
                raise BenchCheckFailed(f"{scenario.name}/{mode_name}: totals vary across instances: {values}")
            expected = scenario.expected.get(mode_name)
            if expected is not None and values[0] != expected:
                raise BenchCheckFailed(
                    f"{scenario.name}/{mode_name}: total {values[0]} != declared {expected}"
                )
        serial, coarse, fine = (fixed[m.value][0] for m in (ExecutionMode.SERIAL, ExecutionMode.COARSE, ExecutionMode.FINE))
        if not fine <= coarse <= serial:
            raise BenchCheckFailed(f"{scenario.name}: mode dominance violated ({fine}, {coarse}, {serial})")
        result.rows.append({
            "scenario": scenario.name,
            "serial_ms": serial,
            "coarse_ms": coarse,
            "fine_ms": fine,
            "coarse_speedup": round(serial / coarse, 3),
            "fine_speedup": round(serial / fine, 3),
        })
    return result


# -- inspection --------------------------------------------------------------------------------


def inspect_path(kind: str, path: Path) -> str:
    if kind == "graph":
        graph = profile_memory.load_graph(path)
        lines = [f"profile graph: {len(graph.concepts)} concepts, {len(graph.entities)} entities, {len(graph.edges)} edges"]
        for cid in sorted(graph.concepts):
            c = graph.concepts[cid]
            lines.append(f"  concept {cid} ({c.name}): {c.entity_count} entities")
        return "\n".join(lines)
    if kind == "acttree":
        tree = action_memory.load_acttree(path)
        lines = [f"acttree {tree.app_id}: {len(tree.nodes)} nodes, {tree.edge_count()} edges"]
        for fp in sorted(tree.nodes):
            node = tree.nodes[fp]
            for edge in node.edges:
                lines.append(f"  {node.summary} --{edge.action.kind.value}--> {edge.child}  tasks={len(edge.task_list)}")
        return "\n".join(lines)
    if kind == "actchain":
        chain = action_memory.load_actchain(path)
        lines = [f"actchain {chain.template_id}: {len(chain.entries)} steps, {chain.variant_count()} variants"]
        for entry in chain.entries:
            lines.append(f"  step {entry.step_index} [{entry.kind.value}]: {len(entry.variants)} variant(s)")
        lines.extend(f"  flag: {f}" for f in chain.flags)
        return "\n".join(lines)
    if kind == "templates":
        store = TemplateStore(root=path)
        lines = [f"template store: {len(store)} templates"]
        for tid in sorted(store.templates):
            t = store.templates[tid]
            lines.append(f"  {tid} [{t.level.value}] steps={len(t.steps)} slots={len(t.slots)}")
        return "\n".join(lines)
    if kind == "session":
        trace = load_trace(path)
        lines = [f"session: {trace.task_text!r} outcome={trace.outcome.value} steps={len(trace.steps)}"]
        for i, ((state, action), origin) in enumerate(zip(trace.steps, trace.annotations)):
            target = action.target.resource_id if action.target else "-"
            lines.append(f"  {i}: {state.app_id}/{state.screen_id} {action.kind.value} {target} [{origin.value}]")
        return "\n".join(lines)
    raise ValueError(f"unknown inspect kind {kind!r}")


def replay_session(session_file: Path, fixtures: Path) -> list[dict]:
    """Re-execute a recorded session and report fingerprint divergences."""
    trace = load_trace(session_file)
    env = SimEnvironment(load_apps(fixtures / "apps"))
    env.reset()
    cursor = env.cursor()
    live = cursor.state()
    diffs = []
    for i, (recorded_state, action) in enumerate(trace.steps):
        if live.fingerprint != recorded_state.fingerprint:
            diffs.append({"step": i, "recorded": recorded_state.fingerprint, "live": live.fingerprint,
                          "screen": f"{live.app_id}/{live.screen_id}"})
        try:
            live, _, _ = cursor.step(action)
        except AgentMemError as e:
            diffs.append({"step": i, "error": str(e)})
            break
    return diffs


# -- entry point ---------------------------------------------------------------------------------


def _write(out: Path, name: str, content: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(content)


def _json(data) -> str:
    return json.dumps(data, indent=1, sort_keys=True) + "\n"


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="agentmem", description=__doc__)
    parser.add_argument("--fixtures", type=Path, default=None, help="fixture root (default: bundled)")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("bench-profile", help="profile learning/retrieval/alignment benchmark")
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--budget", type=int, default=None)
    p.add_argument("--out", type=Path, default=Path("bench-out/profile"))

    p = sub.add_parser("bench-actions", help="action reuse benchmark over the bundled workload")
    p.add_argument("--template-set", choices=[*TEMPLATE_SETS, "all"], default="all")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threshold", type=float, default=None, help="template match threshold (default 0.6)")
    p.add_argument("--out", type=Path, default=Path("bench-out/actions"))

    p = sub.add_parser("bench-schedule", help="execution-mode timelines over bundled scenarios")
    p.add_argument("--mode", default="serial,coarse,fine")
    p.add_argument("--out", type=Path, default=Path("bench-out/schedule"))

    p = sub.add_parser("inspect", help="pretty-print a persisted memory file")
    p.add_argument("kind", choices=["graph", "templates", "acttree", "actchain", "session"])
    p.add_argument("path", type=Path)

    p = sub.add_parser("replay-session", help="re-run a recorded session and diff fingerprints")
    p.add_argument("session", type=Path)

    args = parser.parse_args(argv)
    fixtures = args.fixtures or fixtures_root()

    try:
        if args.cmd == "bench-profile":
            result = bench_profile(fixtures, args.k, args.budget)
            _write(args.out, "metrics.json", _json({
                "alignment": {"graph": result.alignment_graph, "flat": result.alignment_flat},
                "per_user": result.per_user,
                "oracle_calls": {"learning": result.learn_calls, "splits": result.split_calls,
                                 "retrieval": result.retrieval_calls},
                "bfs_visited": result.bfs_visited,
            }))
            _write(args.out, "profile_checks.json", _json(result.profile_checks))
            rows = ["user,alignment_graph,alignment_flat"]
            rows += [f"{u},{v['alignment_graph']:.4f},{v['alignment_flat']:.4f}" for u, v in sorted(result.per_user.items())]
            _write(args.out, "alignment.csv", "\n".join(rows) + "\n")
            print(f"alignment: graph {result.alignment_graph:.1%} vs flat {result.alignment_flat:.1%}")
            print(f"write latency avg {sum(result.write_ms) / len(result.write_ms):.2f} ms, "
                  f"retrieval avg {sum(result.retrieve_ms) / len(result.retrieve_ms):.3f} ms (not persisted)")
        elif args.cmd == "bench-actions":
            config = Config(min_template_similarity=args.threshold) if args.threshold else Config()
            if args.template_set == "all":
                results = bench_actions_compare(fixtures, args.seed, config)
            else:
                results = {args.template_set: bench_actions(fixtures, args.template_set, args.seed, config)}
            summary = {}
            for name, res in results.items():
                per_cat = res.per_category()
                footprint = res.persist_memory(args.out / "memory" / name)
                summary[name] = {"average_reuse": res.average_reuse, "per_category": per_cat,
                                 "memory": footprint}
                rows = ["category,tasks,steps,reused,reuse_rate,steps_saved"]
                rows += [
                    f"{cat},{v['tasks']},{v['steps']},{v['reused']},{v['reuse_rate']:.4f},{v['reused']}"
                    for cat, v in sorted(per_cat.items())
                ]
                _write(args.out, f"reuse_{name}.csv", "\n".join(rows) + "\n")
                print(f"{name}: average reuse {res.average_reuse:.1%}, "
                      f"{footprint['cached_actions']} cached actions in {footprint['bytes'] / 1024:.1f} KB")
            _write(args.out, "metrics.json", _json(summary))
        elif args.cmd == "bench-schedule":
            modes = [ExecutionMode(m.strip()) for m in args.mode.split(",") if m.strip()]
            result = bench_schedule(fixtures, modes)
            for key, csv in result.timelines.items():
                _write(args.out, f"timeline_{key.replace('/', '_').replace('+', '_')}.csv", csv)
            rows = ["scenario,serial_ms,coarse_ms,fine_ms,coarse_speedup,fine_speedup"]
            rows += [
                f"{r['scenario']},{r['serial_ms']},{r['coarse_ms']},{r['fine_ms']},{r['coarse_speedup']},{r['fine_speedup']}"
                for r in result.rows
            ]
            _write(args.out, "speedups.csv", "\n".join(rows) + "\n")
            _write(args.out, "metrics.json", _json(result.rows))
            for r in result.rows:
                print(f"{r['scenario']}: serial {r['serial_ms']} coarse {r['coarse_ms']} fine {r['fine_ms']} "
                      f"(speedups {r['coarse_speedup']}x / {r['fine_speedup']}x)")
        elif args.cmd == "inspect":
            print(inspect_path(args.kind, args.path))
        elif args.cmd == "replay-session":
            diffs = replay_session(args.session, fixtures)
            if diffs:
                print(f"{len(diffs)} divergence(s):")
                for d in diffs:
                    print(f"  {d}")
            else:
                print("zero diffs")
    except AgentMemError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
