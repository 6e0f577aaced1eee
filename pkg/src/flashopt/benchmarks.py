"""Bundled search spaces for demos and synthetic experiments.

The default space mirrors a realistic four-step classification
pipeline: 4 rescaling choices, 2 class-balancing choices, 13 feature
preprocessors, and 14 classifiers, fully connected (1,456 paths, 33
algorithms). Hyperparameter counts per algorithm follow the same
realistic mix of categorical and continuous dimensions.
"""

from __future__ import annotations

from .graph import AlgorithmSpec, HyperparamSpec, PipelineSpec, Step

# (algorithm id, categorical dims, continuous dims) per step
_DEFAULT_LAYOUT: list[list[tuple[str, int, int]]] = [
    [
        ("rescale_none", 0, 0),
        ("rescale_minmax", 0, 0),
        ("rescale_standard", 0, 0),
        ("rescale_robust", 0, 0),
    ],
    [
        ("balance_none", 0, 0),
        ("balance_weighting", 0, 0),
    ],
    [
        ("prep_extra_trees", 2, 3),
        ("prep_fast_ica", 3, 1),
        ("prep_feat_agglo", 2, 1),
        ("prep_kernel_pca", 1, 6),
        ("prep_kitchen_sinks", 0, 2),
        ("prep_linear_svm", 0, 2),
        ("prep_none", 0, 0),
        ("prep_nystroem", 1, 8),
        ("prep_pca", 1, 1),
        ("prep_poly", 1, 2),
        ("prep_trees_embed", 0, 4),
        ("prep_select_pct", 1, 1),
        ("prep_select_rates", 1, 2),
    ],
    [
        ("clf_adaboost", 1, 3),
        ("clf_bernoulli_nb", 1, 3),
        ("clf_decision_tree", 2, 3),
        ("clf_gaussian_nb", 0, 0),
        ("clf_gradient_boost", 0, 6),
        ("clf_knn", 2, 1),
        ("clf_lda", 1, 3),
        ("clf_linear_svm", 0, 2),
        ("clf_kernel_svm", 2, 5),
        ("clf_multinomial_nb", 1, 1),
        ("clf_passive_aggr", 1, 2),
        ("clf_qda", 0, 1),
        ("clf_random_forest", 2, 3),
        ("clf_sgd", 4, 6),
    ],
]

_STEP_NAMES = ["rescaling", "balancing", "preprocessing", "classification"]


def _make_algorithm(name: str, n_cat: int, n_cont: int) -> AlgorithmSpec:
    hps: list[HyperparamSpec] = []
    for i in range(n_cat):
        hps.append(
            HyperparamSpec(
                name=f"choice_{i}",
                kind="categorical",
                choices=("a", "b", "c")[: 2 + (i % 2)],
            )
        )
    for i in range(n_cont):
        if i % 2 == 0:
            hps.append(
                HyperparamSpec(name=f"x{i}", kind="continuous", bounds=(0.0, 1.0))
            )
        else:
            hps.append(
                HyperparamSpec(
                    name=f"x{i}", kind="continuous", bounds=(1e-4, 10.0), scale="log"
                )
            )
    return AlgorithmSpec(id=name, hyperparams=tuple(hps))


def default_benchmark_spec() -> PipelineSpec:
    """The 4/2/13/14 fully connected demo space (1,456 paths)."""
    steps = []
    for idx, layout in enumerate(_DEFAULT_LAYOUT):
        steps.append(
            Step(
                index=idx,
                algorithms=tuple(_make_algorithm(n, c, f) for n, c, f in layout),
            )
        )
    return PipelineSpec.fully_connected("demo-pipeline", steps)
