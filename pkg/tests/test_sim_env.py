import pytest

from agentmem.errors import NoTransition, UnknownCategory, UnknownTarget
from agentmem.sim_env import (
    SimEnvironment,
    generate_workload,
    load_apps,
    load_scenarios,
    make_chain_app,
    mutate_ui,
)
from agentmem.ui_model import Action, ActionKind, ElementSelector


def launch(app_id):
    return Action(ActionKind.LAUNCH, params={"app_id": app_id})


def click(rid):
    return Action(ActionKind.CLICK, ElementSelector(rid, "Button"))


def type_text(rid, text):
    return Action(ActionKind.TYPE_TEXT, ElementSelector(rid, "EditText"), {"text": text})


SHOP_QUERY = [
    launch("shopa"),
    click("search_btn"),
    type_text("search_box", "dji osmo pocket three creator combo"),
    click("submit_btn"),
    Action(ActionKind.EMIT_OUTPUT, output_slot="price"),
    Action(ActionKind.DONE),
]


def run(env, actions):
    cursor = env.cursor()
    out = []
    for action in actions:
        out.append(cursor.step(action))
    return out


def test_apps_load_and_validate(apps):
    assert {"shopa", "shopb", "email", "train", "food", "hotel", "social",
            "searcha", "videoa", "videob", "browser", "media", "map"} <= set(apps)
    for app in apps.values():
        app.validate()


def test_shop_flow_emits_price(env):
    results = run(env, SHOP_QUERY)
    emitted = results[4][1]
    assert emitted == {"price": "199 yuan"}
    assert results[5][0].screen_id == "__end__"
    durations = [r[2] for r in results]
    assert durations == [1000, 600, 1200, 1500, 300, 0]


def test_environment_deterministic(env):
    a = [s.fingerprint for s, _, _ in run(env, SHOP_QUERY)]
    env.reset()
    b = [s.fingerprint for s, _, _ in run(env, SHOP_QUERY)]
    assert a == b


def test_screen_fingerprints_distinct_along_flow(env):
    states = [env.cursor().state()] + [s for s, _, _ in run(env, SHOP_QUERY)]
    fps = [s.fingerprint for s in states]
    assert len(set(fps)) == len(fps)


def test_unknown_element_raises_no_transition(env):
    cursor = env.cursor()
    cursor.step(launch("shopa"))
    with pytest.raises(NoTransition):
        cursor.step(click("ghost_btn"))


def test_unknown_transition_raises(env):
    cursor = env.cursor()
    cursor.step(launch("shopa"))
    with pytest.raises(NoTransition):
        cursor.step(type_text("search_btn", "hello"))  # element exists, transition does not


def test_step_outside_app_raises(env):
    with pytest.raises(NoTransition):
        env.cursor().step(click("search_btn"))


def test_launch_unknown_app_raises(env):
    with pytest.raises(NoTransition):
        env.cursor().step(launch("nope"))


def test_dynamic_text_rendered_from_context(env):
    cursor = env.cursor()
    for action in SHOP_QUERY[:4]:
        cursor.step(action)
    state = cursor.state()
    texts = [e.text for e, _ in state.root.walk()]
    assert "price 199 yuan" in texts


def test_bounds_nested_within_parent(env):
    cursor = env.cursor()
    cursor.step(launch("shopa"))
    state = cursor.state()
    for element, _ in state.root.walk():
        l, t, r, b = element.bounds
        for child in element.children:
            cl, ct, cr, cb = child.bounds
            assert l <= cl <= cr <= r and t <= ct <= cb <= b


# -- mutations ----------------------------------------------------------------------


def fingerprint_of(env, app_id, actions):
    env.reset()
    cursor = env.cursor()
    state = None
    for action in actions:
        state, _, _ = cursor.step(action)
    return state.fingerprint


def test_rename_text_keeps_fingerprint(apps):
    env = SimEnvironment(apps)
    before = fingerprint_of(env, "hotel", [launch("hotel")])
    mutate_ui(apps["hotel"], "rename_text", "home", "search_btn", new_text="Stays")
    after = fingerprint_of(env, "hotel", [launch("hotel")])
    assert before == after


def test_remove_element_changes_fingerprint_locally(apps):
    env = SimEnvironment(apps)
    hotel_results = [launch("hotel"), click("search_btn"),
                     type_text("city_box", "kyoto station south gate lantern district"),
                     click("find_btn")]
    before_results = fingerprint_of(env, "hotel", hotel_results)
    before_home = fingerprint_of(env, "hotel", [launch("hotel")])
    mutate_ui(apps["hotel"], "remove_element", "results", "book_now_btn")
    assert fingerprint_of(env, "hotel", hotel_results) != before_results
    assert fingerprint_of(env, "hotel", [launch("hotel")]) == before_home  # locality


def test_reorder_children_changes_fingerprint(apps):
    env = SimEnvironment(apps)
    before = fingerprint_of(env, "shopa", [launch("shopa")])
    mutate_ui(apps["shopa"], "reorder_children", "home", "shopa_home_root")
    assert fingerprint_of(env, "shopa", [launch("shopa")]) != before


def test_move_element_changes_fingerprint(apps):
    env = SimEnvironment(apps)
    before = fingerprint_of(env, "shopa", [launch("shopa")])
    mutate_ui(apps["shopa"], "move_element", "home", "cart_icon", new_parent="banner")
    assert fingerprint_of(env, "shopa", [launch("shopa")]) != before


def test_mutate_unknown_target_raises(apps):
    with pytest.raises(UnknownTarget):
        mutate_ui(apps["shopa"], "remove_element", "home", "no_such_rid")
    with pytest.raises(UnknownTarget):
        mutate_ui(apps["shopa"], "rename_text", "no_such_screen", "search_btn")


# -- workload and scenarios ------------------------------------------------------------


def test_generate_workload_reproducible():
    a = generate_workload("shopping", 10, seed=7)
    b = generate_workload("shopping", 10, seed=7)
    assert [t.task_text for t in a] == [t.task_text for t in b]
    assert len({t.task_text for t in a}) > 1
    assert all(t.app_id == "shopa" for t in a)


def test_generate_workload_seed_changes_stream():
    a = generate_workload("shopping", 10, seed=7)
    b = generate_workload("shopping", 10, seed=8)
    assert [t.task_text for t in a] != [t.task_text for t in b]


def test_generate_workload_unknown_category():
    with pytest.raises(UnknownCategory):
        generate_workload("gardening", 3, seed=1)


def test_bundled_scenarios_cover_fifty_instances():
    scenarios = load_scenarios()
    assert len(scenarios) == 6
    assert sum(s.instances for s in scenarios) == 50
    names = {s.name for s in scenarios}
    assert "multi-shop+social" in names and "search+shop+social" in names
    for s in scenarios:
        assert s.instantiate() == s.instantiate()  # seeded determinism


def test_chain_app_builder_validates():
    app = make_chain_app("lab", [100, 200, 300], emit_slot="out")
    env = SimEnvironment({"lab": app})
    cursor = env.cursor()
    cursor.step(launch("lab"))
    for i in range(3):
        cursor.step(click(f"next_{i}"))
    state, outputs, _ = cursor.step(Action(ActionKind.EMIT_OUTPUT, output_slot="out"))
    assert outputs == {"out": "lab-out"}
