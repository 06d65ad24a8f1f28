"""Shared fixtures: the default training run and the paired ablation are expensive,
so each runs at most once per session."""

import os
import time
from dataclasses import dataclass, replace

for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import pytest  # noqa: E402

from deepsnake import harness as hn  # noqa: E402

ACCEPTANCE_LINES = []

# reduced schedule for the six ablation trainings (three seeds, two conv kinds)
ABLATION = dict(train_count=400, eval_count=200, epochs=4, lr_decay_epochs=(2, 3))


def record(name, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@dataclass
class DefaultRun:
    result: hn.TrainResult
    seconds: float
    report_jitter: hn.EvalReport
    report_exact: hn.EvalReport
    eval_set: list


@pytest.fixture(scope="session")
def default_run(tmp_path_factory):
    """The default configuration trained from scratch, timed end to end."""
    config = hn.TrainConfig(out_dir=str(tmp_path_factory.mktemp("default_run")))
    t0 = time.perf_counter()
    train_set, eval_set = hn.load_datasets(config)
    result = hn.train(config, data=(train_set, eval_set))
    seconds = time.perf_counter() - t0
    models, _, _, _ = hn.load_checkpoint(result.best_checkpoint, expect_net=config.net)
    jitter = hn.evaluate(models, eval_set, config.iterations, use_jitter=True)
    exact = hn.evaluate(models, eval_set, config.iterations, use_jitter=False)
    return DefaultRun(result, seconds, jitter, exact, eval_set)


@pytest.fixture(scope="session")
def ablation_run(tmp_path_factory):
    config = replace(hn.TrainConfig(out_dir=str(tmp_path_factory.mktemp("ablation"))), **ABLATION)
    return hn.ablate(config, seeds=(0, 1, 2), max_iterations=5)
