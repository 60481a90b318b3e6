"""Shared fixtures: hand-built scenes and small networks."""
import numpy as np
import pytest

from xaibench.micronet.model import ModelConfig, build_model
from xaibench.program import program_from_functions, program_vocabulary, parse_program
from xaibench.scene import SceneGraph, make_object


@pytest.fixture
def s2():
    """Two objects: a large gray rubber sphere and a small red metal cube."""
    return SceneGraph(
        (
            make_object(0, "large", "gray", "rubber", "sphere", (10, 12)),
            make_object(1, "small", "red", "metal", "cube", (30, 8)),
        ),
        (40, 40),
    )


@pytest.fixture
def same_size_scene():
    """One shiny sphere, three other small things and two large objects.

    o0 small brown metal sphere; o1 small gray rubber cube; o2 small purple
    rubber cylinder; o3 small cyan rubber cube; o4 large purple metal
    cylinder; o5 large yellow rubber cube.
    """
    objs = [
        ("small", "brown", "metal", "sphere", (20, 30)),
        ("small", "gray", "rubber", "cube", (10, 44)),
        ("small", "purple", "rubber", "cylinder", (40, 20)),
        ("small", "cyan", "rubber", "cube", (50, 50)),
        ("large", "purple", "metal", "cylinder", (30, 14)),
        ("large", "yellow", "rubber", "cube", (52, 30)),
    ]
    return SceneGraph(tuple(make_object(k, *o) for k, o in enumerate(objs)), (64, 64))


@pytest.fixture
def same_size_program():
    return program_from_functions([
        ("scene",), ("filter_material", "metal"), ("filter_shape", "sphere"),
        ("unique",), ("same_size",), ("exist",),
    ])


@pytest.fixture
def tree_scene():
    """o0 large purple rubber cube; o1 large blue rubber cube; o2 small green metal cylinder; o3 small yellow rubber sphere."""
    objs = [
        ("large", "purple", "rubber", "cube", (16, 16)),
        ("large", "blue", "rubber", "cube", (46, 20)),
        ("small", "green", "metal", "cylinder", (20, 46)),
        ("small", "yellow", "rubber", "sphere", (48, 48)),
    ]
    return SceneGraph(tuple(make_object(k, *o) for k, o in enumerate(objs)), (64, 64))


@pytest.fixture
def tree_program():
    """Count of objects that are large purple cubes or green metal cubes."""
    return parse_program([
        {"function": "scene", "inputs": [], "value_inputs": []},
        {"function": "filter_size", "inputs": [0], "value_inputs": ["large"]},
        {"function": "filter_color", "inputs": [1], "value_inputs": ["purple"]},
        {"function": "filter_shape", "inputs": [2], "value_inputs": ["cube"]},
        {"function": "scene", "inputs": [], "value_inputs": []},
        {"function": "filter_color", "inputs": [4], "value_inputs": ["green"]},
        {"function": "filter_material", "inputs": [5], "value_inputs": ["metal"]},
        {"function": "filter_shape", "inputs": [6], "value_inputs": ["cube"]},
        {"function": "union", "inputs": [3, 7], "value_inputs": []},
        {"function": "count", "inputs": [8], "value_inputs": []},
    ])


def tiny_config(**kw):
    base = dict(input_shape=(3, 24, 24), conv_channels=(4, 4, 4, 4), rn_hidden=(8, 8, 8, 8),
                classifier_hidden=(8, 8), question_dim=6)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny_model():
    """Small random network with non-trivial batchnorm statistics, in inference mode."""
    model = build_model(tiny_config(), seed=3, vocab=program_vocabulary())
    randomize_batchnorm(model, np.random.default_rng(5))
    return model


def randomize_batchnorm(model, rng):
    from xaibench.micronet.layers import BatchNorm
    for layer in model.layers:
        if isinstance(layer, BatchNorm):
            n = layer.gamma.shape[0]
            layer.gamma[:] = rng.uniform(0.5, 1.5, n)
            layer.beta[:] = rng.normal(0, 0.2, n)
            layer.running_mean[:] = rng.normal(0, 0.3, n)
            layer.running_var[:] = rng.uniform(0.5, 2.0, n)


def pytest_terminal_summary(terminalreporter):
    """Echo the acceptance PASS/FAIL lines at the end of the run."""
    import sys
    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(module.RESULTS):
        terminalreporter.write_line(module.RESULTS[n])
