"""Shared toy pipeline specs used across the test modules."""

import pytest

from flashopt.graph import AlgorithmSpec, HyperparamSpec, PipelineSpec, Step


def make_alg(aid, hyperparams=()):
    return AlgorithmSpec(id=aid, hyperparams=tuple(hyperparams))


def cont(name, lo, hi, scale="linear", default=None):
    if default is None:
        default = lo
    return HyperparamSpec(name=name, kind="continuous", bounds=(lo, hi), scale=scale, default=default)


def integer(name, lo, hi, default=None):
    if default is None:
        default = lo
    return HyperparamSpec(name=name, kind="integer", bounds=(lo, hi), default=default)


def cat(name, choices, default=None):
    if default is None:
        default = choices[0]
    return HyperparamSpec(name=name, kind="categorical", choices=tuple(choices), default=default)


@pytest.fixture
def toy_2x3():
    """Fully connected two-step spec, 2 x 3 = 6 paths."""
    return PipelineSpec.fully_connected(
        name="toy-2x3",
        steps=[
            Step(index=0, algorithms=(make_alg("v1"), make_alg("v2"))),
            Step(index=1, algorithms=(make_alg("w1"), make_alg("w2"), make_alg("w3"))),
        ],
    )


@pytest.fixture
def restricted_2x3():
    """Same shape as toy_2x3 with the v1->w3 transition removed: 5 paths."""
    steps = (
        Step(index=0, algorithms=(make_alg("v1"), make_alg("v2"))),
        Step(index=1, algorithms=(make_alg("w1"), make_alg("w2"), make_alg("w3"))),
    )
    edges = frozenset(
        (a.id, b.id)
        for a in steps[0].algorithms
        for b in steps[1].algorithms
        if (a.id, b.id) != ("v1", "w3")
    )
    return PipelineSpec(name="toy-2x3-restricted", steps=steps, edges=edges)


@pytest.fixture
def square_2x2():
    """Fully connected 2-step spec with 2 algorithms per step: 4 paths."""
    return PipelineSpec.fully_connected(
        name="square-2x2",
        steps=[
            Step(index=0, algorithms=(make_alg("a1"), make_alg("a2"))),
            Step(index=1, algorithms=(make_alg("b1"), make_alg("b2"))),
        ],
    )


@pytest.fixture
def single_path_spec():
    """One algorithm per step, no hyperparameters: exactly one path."""
    return PipelineSpec.fully_connected(
        name="single",
        steps=[
            Step(index=0, algorithms=(make_alg("only-a"),)),
            Step(index=1, algorithms=(make_alg("only-b"),)),
        ],
    )


@pytest.fixture
def hp_spec():
    """Two-step spec whose algorithms carry a mix of hyperparameter kinds."""
    return PipelineSpec.fully_connected(
        name="hp-toy",
        steps=[
            Step(
                index=0,
                algorithms=(
                    make_alg(
                        "prep",
                        [
                            cont("alpha", 0.0, 1.0, default=0.5),
                            cont("lr", 1e-4, 1.0, scale="log", default=1e-2),
                        ],
                    ),
                    make_alg("skip"),
                ),
            ),
            Step(
                index=1,
                algorithms=(
                    make_alg(
                        "model",
                        [
                            integer("depth", 1, 8, default=3),
                            cat("loss", ["hinge", "square", "logit"]),
                        ],
                    ),
                    make_alg("baseline", [cont("c", -1.0, 1.0, default=0.0)]),
                ),
            ),
        ],
    )
