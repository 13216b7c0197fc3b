import numpy as np
import pytest
from hypothesis import settings

from advgdro import data as D
from advgdro import evaluation as E
from advgdro import model as M

settings.register_profile("default", deadline=None)
settings.load_profile("default")

# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES = {}
# every report built during the session is checked against the metric identities
IDENTITY_LOG = {"checked": 0, "violations": []}


def _identity_problems(rep, attack):
    problems = []
    if rep.robust_acc != min(rep.per_group_acc) or rep.robust_adv_acc != min(rep.per_group_adv_acc):
        problems.append("robust metric is not the per-group minimum")
    if rep.average_acc < rep.robust_acc or rep.adversarial_acc < rep.robust_adv_acc:
        problems.append("average below its worst group")
    if attack is None or attack.get("epsilon") == 0:
        if rep.adversarial_acc != rep.average_acc or rep.per_group_adv_acc != rep.per_group_acc:
            problems.append("zero-radius adversarial metrics differ from clean metrics")
    return problems


@pytest.fixture(autouse=True)
def _check_every_report(monkeypatch):
    original = E.report_from_predictions

    def checked(ds, clean_pred, adv_pred, attack=None):
        rep = original(ds, clean_pred, adv_pred, attack)
        problems = _identity_problems(rep, attack)
        IDENTITY_LOG["checked"] += 1
        if problems:
            IDENTITY_LOG["violations"].append(problems)
            raise AssertionError("; ".join(problems))
        return rep

    monkeypatch.setattr(E, "report_from_predictions", checked)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    n, bad = IDENTITY_LOG["checked"], len(IDENTITY_LOG["violations"])
    ACCEPTANCE_LINES.setdefault(7, "")
    ACCEPTANCE_LINES[7] = (f"{'PASS' if bad == 0 and ACCEPTANCE_LINES[7].startswith('PASS') else 'FAIL'} "
                           f"criterion 7 (metric identities): {n} evaluations across the session, "
                           f"{bad} violations; {ACCEPTANCE_LINES[7].split(': ', 1)[-1]}")
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])


def random_params(rng, sizes, activation="tanh"):
    return M.init_params(sizes, activation, rng)


def toy_dataset(seed=0, sizes=(40, 10, 10, 40), d=6, split="train"):
    """Small four-group dataset with label-carrying first coordinate."""
    spec = D.SpuriousSpec({split: sizes}, core_dims=2, spurious_dims=2, noise_dims=d - 4, seed=seed)
    return D.generate(spec)[split]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy():
    return toy_dataset()
