import numpy as np
import pandas as pd
import pytest

from eventstudy import dgp
from eventstudy.panel import STUDENT_COLUMNS, Codebook, coerce_records

SMALL = dict(n_municipalities=20, n_ring=6, students_per_cell=40,
             opening_years=(2009, 2010, 2012, 2013), seed=7)


def raw_row(**kw) -> dict:
    row = {
        "student_id": "s1", "municipality_id": "M1", "state_id": "S1", "year": "2010",
        "grade_nat": "500", "grade_hum": "500", "grade_lang": "500", "grade_math": "500",
        "essay_grade": "600", "present_day1": "1", "present_day2": "1",
        "sex": "M", "race": "1", "age": "17", "family_income": "2", "father_hs": "0",
        "mother_hs": "1", "marital_status": "1",
    }
    row.update({k: str(v) for k, v in kw.items()})
    return row


def make_records(rows: list[dict], codebook: Codebook | None = None) -> pd.DataFrame:
    raw = pd.DataFrame([raw_row(student_id=f"s{i}", **r) for i, r in enumerate(rows)], columns=STUDENT_COLUMNS)
    return coerce_records(raw, codebook or Codebook.load())


@pytest.fixture(scope="session")
def codebook():
    return Codebook.load()


@pytest.fixture(scope="session")
def small_sim():
    return dgp.simulate_panel(dgp.DgpConfig(**SMALL))


@pytest.fixture(scope="session")
def small_files(small_sim, tmp_path_factory):
    out = tmp_path_factory.mktemp("small")
    small_sim.write(out)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_panel(small_sim):
    from eventstudy.panel import prepare_panel
    return prepare_panel(small_sim.records)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS):
            terminalreporter.write_line(line)
