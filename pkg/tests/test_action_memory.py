import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from agentmem.action_memory import (
    ActChain,
    ActTree,
    ChainEntry,
    ChainVariant,
    Verdict,
    actchain_invalidate,
    actchain_lookup,
    actchain_record,
    acttree_invalidate,
    acttree_lookup,
    acttree_record,
    load_actchain,
    load_acttree,
    reuse_rate,
    reuse_threshold,
    save_actchain,
    save_acttree,
    verify_action,
)
from agentmem.embedding import embed
from agentmem.experience_memory import StepKind
from agentmem.ui_model import Action, ActionKind, ElementSelector, Outcome, StepOrigin, TraceRecord
from conftest import el, screen


def click(rid, text=""):
    return Action(ActionKind.CLICK, ElementSelector(rid, "Button", text))


def tree_with_edges(*edges):
    tree = ActTree(app_id="shop")
    for task, action, child in edges:
        acttree_record(tree, "fp-root", "shop/home", action, child, task, embed(task))
    return tree


# -- reuse threshold schedule -----------------------------------------------------


def test_threshold_linear_then_capped():
    assert reuse_threshold(0) == pytest.approx(0.55)
    assert reuse_threshold(4) == pytest.approx(0.75)
    assert reuse_threshold(50) == pytest.approx(0.95)


def test_lookup_missing_fingerprint_misses():
    tree = tree_with_edges(("buy socks", click("a"), "fp-a"))
    decision = acttree_lookup(tree, "fp-unknown", embed("buy socks"), 0)
    assert decision.verdict is Verdict.MISS


def test_lookup_identical_task_reuses_at_depth_zero():
    tree = tree_with_edges(("buy socks", click("a"), "fp-a"))
    decision = acttree_lookup(tree, "fp-root", embed("buy socks"), 0)
    assert decision.verdict is Verdict.REUSE
    assert decision.similarity == pytest.approx(1.0)
    assert decision.action.target.resource_id == "a"


def test_lookup_depth_raises_the_bar():
    # two candidate edges at similarity ~0.70 and ~0.60: good enough at depth 0,
    # rejected at depth 4 where the threshold is 0.75
    tree = ActTree(app_id="shop")
    base = "alpha bravo charlie delta echo foxtrot golf hotel india juliet"
    near = "alpha bravo charlie delta echo foxtrot golf kilo lima mike"
    far = "alpha bravo charlie delta echo uniform victor whiskey xray zulu"
    acttree_record(tree, "fp", "s", click("near"), "fp-n", near, embed(near))
    acttree_record(tree, "fp", "s", click("far"), "fp-f", far, embed(far))
    query = embed(base)
    sims = sorted(
        (float(np.dot(query, embed(t))) for t in (near, far)), reverse=True
    )
    assert sims[0] >= 0.65 and sims[1] < sims[0]
    at0 = acttree_lookup(tree, "fp", query, 0)
    assert at0.verdict is Verdict.REUSE
    assert at0.action.target.resource_id == "near"
    at4 = acttree_lookup(tree, "fp", query, 4)
    assert at4.verdict is Verdict.MISS
    assert at4.threshold_used == pytest.approx(0.75)
    assert at4.similarity == pytest.approx(sims[0])


def test_lookup_tie_breaks_on_support_then_child():
    tree = ActTree(app_id="shop")
    acttree_record(tree, "fp", "s", click("a"), "fp-zz", "same task text", embed("same task text"))
    acttree_record(tree, "fp", "s", click("b"), "fp-aa", "same task text", embed("same task text"))
    acttree_record(tree, "fp", "s", click("b"), "fp-aa", "same task text two", embed("same task text two"))
    decision = acttree_lookup(tree, "fp", embed("same task text"), 0)
    assert decision.action.target.resource_id == "b"  # larger task_list wins
    tree2 = ActTree(app_id="shop")
    acttree_record(tree2, "fp", "s", click("a"), "fp-zz", "task", embed("task"))
    acttree_record(tree2, "fp", "s", click("b"), "fp-aa", "task", embed("task"))
    decision2 = acttree_lookup(tree2, "fp", embed("task"), 0)
    assert decision2.child == "fp-aa"  # lexicographic child fingerprint


@settings(max_examples=1000, deadline=None)
@given(st.floats(min_value=0.0, max_value=1.0), st.floats(min_value=0.0, max_value=0.45),
       st.integers(min_value=0, max_value=12))
def test_raising_tau_never_adds_reuse(tau0, bump, depth):
    tree = tree_with_edges(
        ("query the camera price", click("a"), "fp-a"),
        ("book a quiet hotel room", click("b"), "fp-b"),
    )
    q = embed("query the camera cost")
    low = acttree_lookup(tree, "fp-root", q, depth, tau0=tau0)
    high = acttree_lookup(tree, "fp-root", q, depth, tau0=tau0 + bump)
    assert not (low.verdict is Verdict.MISS and high.verdict is Verdict.REUSE)
    if high.verdict is Verdict.REUSE:
        assert high.action.identity() == low.action.identity()


# -- ActTree maintenance -------------------------------------------------------------


def test_record_merges_identical_edge_and_grows_task_list():
    tree = tree_with_edges(("t1", click("a"), "fp-a"), ("t2", click("a"), "fp-a"))
    assert tree.edge_count() == 1
    assert tree.nodes["fp-root"].edges[0].task_list == ["t1", "t2"]


def test_invalidate_sole_support_removes_edge_and_subtree():
    tree = ActTree(app_id="shop")
    acttree_record(tree, "fp-root", "s0", click("a"), "fp-a", "t1", embed("t1"))
    acttree_record(tree, "fp-a", "s1", click("b"), "fp-b", "t1", embed("t1"))
    removed = acttree_invalidate(tree, "fp-root", click("a"), "t1")
    assert removed
    assert tree.edge_count() == 0
    assert "fp-a" not in tree.nodes  # orphaned subtree collected


def test_invalidate_with_other_support_prunes_task_only():
    tree = tree_with_edges(("t1", click("a"), "fp-a"), ("t2", click("a"), "fp-a"))
    removed = acttree_invalidate(tree, "fp-root", click("a"), "t1")
    assert not removed
    edge = tree.nodes["fp-root"].edges[0]
    assert edge.task_list == ["t2"]
    assert len(edge.task_embeddings) == 1


# -- ActChain ---------------------------------------------------------------------------


def chain():
    c = ActChain(template_id="tmpl-shop")
    actchain_record(c, 0, StepKind.INVARIANT, {}, click("search_btn"))
    actchain_record(c, 1, StepKind.VARIABLE, {"item": "DJI Action 5"},
                    Action(ActionKind.TYPE_TEXT, ElementSelector("box", "EditText"), {"text": "DJI Action 5"}))
    return c


def test_chain_invariant_step_hits_without_params():
    assert actchain_lookup(chain(), 0, {}).target.resource_id == "search_btn"


def test_chain_variable_exact_param_match():
    c = chain()
    assert actchain_lookup(c, 1, {"item": "DJI Action 5"}) is not None
    assert actchain_lookup(c, 1, {"item": " DJI Action 5 "}) is not None  # trimmed equality
    assert actchain_lookup(c, 1, {"item": "iPhone 15"}) is None


def test_chain_missing_step_misses():
    assert actchain_lookup(chain(), 7, {}) is None


def test_chain_invariant_conflict_flags_and_replaces():
    c = chain()
    actchain_record(c, 0, StepKind.INVARIANT, {}, click("other_btn"))
    assert len(c.flags) == 1
    assert actchain_lookup(c, 0, {}).target.resource_id == "other_btn"


def test_chain_new_variant_inserted():
    c = chain()
    actchain_record(c, 1, StepKind.VARIABLE, {"item": "iPhone 15"},
                    Action(ActionKind.TYPE_TEXT, ElementSelector("box", "EditText"), {"text": "iPhone 15"}))
    assert len(c.entry(1).variants) == 2
    assert actchain_lookup(c, 1, {"item": "iPhone 15"}) is not None


def test_chain_invariant_single_variant_invariant_holds():
    c = chain()
    for entry in c.entries:
        if entry.kind is StepKind.INVARIANT:
            assert len(entry.variants) == 1
            assert entry.variants[0].params == {}


def test_chain_invalidate_variant():
    c = chain()
    assert actchain_invalidate(c, 1, {"item": "DJI Action 5"})
    assert actchain_lookup(c, 1, {"item": "DJI Action 5"}) is None
    assert not actchain_invalidate(c, 1, {"item": "DJI Action 5"})


# -- verification -------------------------------------------------------------------------


def results_screen(button_text="Book Now"):
    return screen("hotel", "results", el("root", "Frame", children=[
        el("title", "TextView", "Hilton Kyoto"),
        el("book_now_btn", "Button", button_text),
    ]))


def test_verify_unchanged_screen_rebinds():
    action = Action(ActionKind.CLICK, ElementSelector("book_now_btn", "Button", "Book Now"))
    verified = verify_action(action, results_screen())
    assert verified is not None
    assert verified.target.path == (1,)


def test_verify_renamed_text_survives_when_similar():
    # resource id and class still match: 0.5 + 0.2 + 0.3*sim >= 0.8 iff sim >= 1/3
    action = Action(ActionKind.CLICK, ElementSelector("book_now_btn", "Button", "Book Now"))
    verified = verify_action(action, results_screen(button_text="Book now!"))
    assert verified is not None
    assert verified.target.text == "Book now!"


def test_verify_removed_element_is_stale():
    action = Action(ActionKind.CLICK, ElementSelector("book_now_btn", "Button", "Book Now"))
    s = results_screen()
    s.root.children.pop(1)
    assert verify_action(action, screen("hotel", "results", s.root)) is None


def test_verify_untargeted_actions_pass_through():
    done = Action(ActionKind.DONE)
    assert verify_action(done, results_screen()) is done


# -- reuse rate -----------------------------------------------------------------------------


def _trace(origins):
    s = results_screen()
    steps = [(s, Action(ActionKind.CLICK, ElementSelector("book_now_btn", "Button"))) for _ in origins]
    return TraceRecord("t", steps, Outcome.SUCCESS, list(origins))


def test_reuse_rate_all_oracle_zero():
    assert reuse_rate(_trace([StepOrigin.ORACLE] * 4)) == 0.0


def test_reuse_rate_counts_both_cache_kinds():
    origins = [StepOrigin.ACTTREE_REUSE] * 4 + [StepOrigin.ACTCHAIN_REUSE] * 3 + [StepOrigin.ORACLE] * 3
    assert reuse_rate(_trace(origins)) == pytest.approx(0.7)


# -- persistence -------------------------------------------------------------------------------


def test_acttree_round_trip(tmp_path):
    tree = tree_with_edges(("t1", click("a", "Go"), "fp-a"), ("t2", click("b"), "fp-b"))
    p = tmp_path / "acttree" / "shop.json"
    save_acttree(tree, p)
    back = load_acttree(p)
    assert back.app_id == "shop"
    assert back.edge_count() == 2
    edge = back.find_edge("fp-root", click("a", "Go"))
    assert edge.task_list == ["t1"]
    assert len(edge.task_embeddings) == 1  # recomputed from task text on load


def test_actchain_round_trip(tmp_path):
    c = chain()
    p = tmp_path / "actchain" / "tmpl-shop.json"
    save_actchain(c, p)
    back = load_actchain(p)
    assert back.template_id == "tmpl-shop"
    assert actchain_lookup(back, 1, {"item": "DJI Action 5"}) is not None
