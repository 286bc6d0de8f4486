import json

import pytest

from agentmem.config import fixtures_root
from agentmem.experience_memory import TemplateStore
from agentmem.oracles import OracleSuite
from agentmem.record_replay import Memories
from agentmem.sim_env import SimEnvironment, load_apps
from agentmem.ui_model import UIElement, UIState


def el(rid, cls="View", text="", children=None):
    return UIElement(resource_id=rid, class_name=cls, text=text, children=children or [])


def screen(app_id, screen_id, root):
    return UIState(app_id=app_id, screen_id=screen_id, root=root)


@pytest.fixture()
def apps():
    return load_apps()


@pytest.fixture()
def env(apps):
    return SimEnvironment(apps)


def load_extractors():
    return json.loads((fixtures_root() / "oracles" / "extractors.json").read_text())


def template_store(*sets):
    """Fresh in-memory store loaded from the named bundled template sets."""
    store = TemplateStore()
    for name in sets:
        store.load_dir(fixtures_root() / "templates" / name)
    return store


def make_suite(env=None, operator_depth=None, rulebook=None):
    return OracleSuite.scripted(
        env=env, rulebook=rulebook, extractors=load_extractors(), operator_depth=operator_depth
    )


def make_memories(*template_sets, sessions_dir=None, queues=None):
    return Memories(templates=template_store(*template_sets), sessions_dir=sessions_dir, queues=queues)
