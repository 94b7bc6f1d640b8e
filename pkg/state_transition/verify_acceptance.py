"""
Desk-scale training experiments. Training the policies takes minutes on a CPU, so they only
run with ``pytest -m slow``.
"""
import logging
from dataclasses import replace
from pathlib import Path
from typing import Dict

import numpy as np
import pytest

from state_transition.analysis import AttentionTrace, inspect_attention
from state_transition.dataset import Dataset, generate_dataset
from state_transition.evaluation import Regime, evaluate_seeds
from state_transition.experiments import train_policy
from state_transition.policy import Policy, Variant
from state_transition.run_config import RunConfig, load_config

logger = logging.getLogger(__name__)

pytestmark = pytest.mark.slow

DESK_CONFIG = Path(__file__).parent.parent / "configs" / "desk.yaml"
SEED = 0


def success(run: RunConfig, policy: Policy, regime: Regime, **kwargs) -> float:
    eval_config = replace(run.eval, regime=regime)
    return evaluate_seeds(policy, run.train, eval_config, run.env, SEED, **kwargs).mean


@pytest.fixture(scope="module")
def desk() -> RunConfig:
    return load_config(DESK_CONFIG)


@pytest.fixture(scope="module")
def recovery_rich(desk: RunConfig, tmp_path_factory: pytest.TempPathFactory) -> Dataset:
    return generate_dataset(tmp_path_factory.mktemp("data"), desk.data.episodes, noise_on=True, seed=SEED,
                            env_config=desk.env, noise_config=desk.noise, workers=desk.data.workers)


@pytest.fixture(scope="module")
def trained(desk: RunConfig, recovery_rich: Dataset, tmp_path_factory: pytest.TempPathFactory) -> Dict[str, Policy]:
    out = tmp_path_factory.mktemp("runs")
    policies = {}
    for variant in Variant:
        policies[variant.value], _ = train_policy(desk, recovery_rich, SEED, out / variant.value, variant=variant)
    return policies


def verify_history_beats_no_history(desk: RunConfig, trained: Dict[str, Policy]) -> None:
    sta = success(desk, trained[Variant.STA.value], Regime.OCCLUDED)
    standard = success(desk, trained[Variant.STANDARD_XATTN.value], Regime.OCCLUDED)
    no_history = success(desk, trained[Variant.NO_HISTORY.value], Regime.OCCLUDED)
    logger.info("occluded success: sta %.3f, standard %.3f, no history %.3f", sta, standard, no_history)
    assert sta >= no_history + 0.15
    assert sta >= standard - 0.03


def verify_masking_helps_masked_inference(desk: RunConfig, recovery_rich: Dataset, trained: Dict[str, Policy],
                                          tmp_path: Path) -> None:
    unmasked, _ = train_policy(desk, recovery_rich, SEED, tmp_path / "sta_unmasked", variant=Variant.STA,
                               mask_enabled=False)
    with_mask = success(desk, trained[Variant.STA.value], Regime.OCCLUDED, masked_inference=True)
    without_mask = success(desk, unmasked, Regime.OCCLUDED, masked_inference=True)
    logger.info("masked inference: trained with masking %.3f, without %.3f", with_mask, without_mask)
    assert with_mask >= without_mask + 0.05


def verify_truncated_history_degrades_gracefully(desk: RunConfig, trained: Dict[str, Policy]) -> None:
    policy = trained[Variant.STA.value]
    assert policy.config.k_max == 15
    full = success(desk, policy, Regime.UNOCCLUDED, inference_history=15)
    for history in (7, 3, 1):
        truncated = success(desk, policy, Regime.UNOCCLUDED, inference_history=history)
        logger.info("history %d: %.3f (full window %.3f)", history, truncated, full)
        assert truncated >= full - 0.20


def far_share(trace: AttentionTrace) -> float:
    "Share of the transition score magnitude on offsets of 5 or more"
    magnitude = np.abs(trace.token_sums)
    return float(magnitude[:, 5:].sum() / magnitude.sum())


def verify_post_detour_steps_reach_further_back(desk: RunConfig, trained: Dict[str, Policy]) -> None:
    early, after_detour = [], []
    for index in range(50):
        # a prefilled window gives the first steps far offsets too
        inspection = inspect_attention(trained[Variant.STA.value], desk.eval.seed_offset + index,
                                       env_config=desk.env, regime=Regime.OCCLUDED, prefill_history=True)
        detour = inspection.first_detour()
        if detour is None or detour < 5:
            continue
        early.append(np.mean([far_share(trace) for trace in inspection.traces[:5]]))
        after_detour.append(np.mean([far_share(trace) for trace in inspection.traces[detour + 1:]]))
    logger.info("%d detouring episodes: far share %.3f before, %.3f after the detour",
                len(early), np.mean(early) if early else np.nan, np.mean(after_detour) if after_detour else np.nan)
    assert early, "no inspected episode detoured after its first five steps"
    assert np.mean(after_detour) > np.mean(early)
