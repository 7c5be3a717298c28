"""Shared fixtures. The expensive ones (trained toy models, the CLI run) are
session scoped and built lazily, so a filtered run only pays for what it
uses."""

from __future__ import annotations

import copy
import os
import shutil
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from reenact.data import DEFAULT_SPEAKERS, build_utterances, pitch_sweep_utterances, synthetic_utterances
from reenact.model import ModelConfig
from reenact.training import TrainConfig, autoencoder_step, new_state, pretrain_f0_encoder, run_steps, sample_batch

REPO = Path(__file__).resolve().parents[1]
TOY_SPEAKERS = ("p232", "p253")

torch.set_num_threads(1)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")
    config._acceptance = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when not in ("setup", "call"):
        return
    n = marker.args[0]
    results = item.config._acceptance
    detail = dict(item.user_properties).get("detail", "")
    if rep.when == "setup" and not rep.passed:
        results[n] = ("FAIL" if rep.failed else "SKIP", "setup: " + str(rep.longrepr).splitlines()[-1])
    elif rep.when == "call":
        prev = results.get(n)
        status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
        if prev is not None and prev[0] == "FAIL":
            return
        results[n] = (status, detail)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = getattr(config, "_acceptance", {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        status, detail = results[n]
        terminalreporter.write_line(f"criterion {n:>2}: {status}  {detail}")


@pytest.fixture
def report(request):
    """``report("...")`` attaches a one-line measurement to the criterion line."""

    def _report(text: str) -> None:
        request.node.user_properties.append(("detail", text))
        print(text)

    return _report


# ---------------------------------------------------------------------------
# toy data and models
# ---------------------------------------------------------------------------

@pytest.fixture(scope="session")
def toy_set():
    """10 utterances, 5 each from one male and one female synthetic speaker."""
    items = synthetic_utterances(DEFAULT_SPEAKERS[:1] + DEFAULT_SPEAKERS[2:3], 5, seed=3)
    utts, st = build_utterances(items)
    return utts, st


@pytest.fixture(scope="session")
def toy_f0_model(toy_set):
    utts, _ = toy_set
    return pretrain_f0_encoder(utts, TrainConfig.toy(), model_config=ModelConfig.toy(n_speakers=2))


def fresh_copy(model):
    return copy.deepcopy(model)


@pytest.fixture(scope="session")
def overfit_dual(toy_set, toy_f0_model):
    """500 dual-mode diff_id steps on the toy set; returns (model, log, seconds)."""
    utts, _ = toy_set
    cfg = TrainConfig.toy()
    state = new_state(fresh_copy(toy_f0_model), cfg, TOY_SPEAKERS)
    t0 = time.perf_counter()
    run_steps(state, cfg, utts, [], cfg.total_steps)
    return state.model, state.log, time.perf_counter() - t0


@pytest.fixture(scope="session")
def overfit_ae(toy_set, toy_f0_model):
    """The auto-encoder oracle: same data, steps and optimizer, no adversary."""
    utts, _ = toy_set
    cfg = TrainConfig.toy(lambda_adv=0.0, discriminator_regime="same_id")
    state = new_state(fresh_copy(toy_f0_model), cfg, TOY_SPEAKERS)
    for _ in range(cfg.total_steps):
        autoencoder_step(sample_batch(utts, cfg.batch_size, state.rng), state, cfg)
    return state.model, state.log


@pytest.fixture(scope="session")
def sine_f0_model():
    """F0 encoder pre-trained on the 20-utterance synthetic pitch set."""
    utts, st = pitch_sweep_utterances(20, seed=0)
    model = pretrain_f0_encoder(utts, TrainConfig(), model_config=ModelConfig.toy())
    return model, st


# ---------------------------------------------------------------------------
# CLI pipeline
# ---------------------------------------------------------------------------

def _run_cli(args):
    from reenact.cli import main

    return main([str(a) for a in args])


@pytest.fixture(scope="session")
def cli_run(tmp_path_factory):
    """The six stages on a freshly generated synthetic corpus with the
    bundled toy config; returns a dict with paths, exit codes and timing."""
    base = tmp_path_factory.mktemp("pipeline")
    data, out = base / "data", base / "run"
    config = base / "toy.toml"
    shutil.copy(REPO / "configs" / "toy.toml", config)
    codes = {}
    old_env = os.environ.get("REENACT_DATA")
    os.environ["REENACT_DATA"] = str(data)
    t0 = time.perf_counter()
    try:
        codes["synth"] = _run_cli(["synth", data])
        common = ["--config", config, "--out", out]
        for stage in ("prepare", "train-f0", "pretrain", "finetune"):
            codes[stage] = _run_cli(common + [stage])
        request = base / "request.json"
        request.write_text(
            '{"source_wav": "data/p232/p232_001.wav", "source_speaker_id": "p232", '
            '"target_speaker_id": "p253", "target_reference_wav": "data/p253/p253_002.wav", '
            '"f0_mode": "transfer_normalized", "name": "smoke"}'
        )
        codes["convert"] = _run_cli(common + ["convert", request])
        codes["evaluate"] = _run_cli(common + ["evaluate"])
    finally:
        if old_env is None:
            os.environ.pop("REENACT_DATA", None)
        else:
            os.environ["REENACT_DATA"] = old_env
    return {"base": base, "data": data, "out": out, "config": config, "codes": codes,
            "seconds": time.perf_counter() - t0}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
