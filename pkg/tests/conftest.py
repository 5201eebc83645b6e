import numpy as np
import pytest

from deeprat.channel import ModelKind, RatRadioProfile
from deeprat.config import load_config, load_paper_config, paper_config_path
from deeprat.env import EdQosProfile, NormalizationSpec

TOY_CONFIG = paper_config_path().parent / "toy.cfg"

# chi-square critical values at the 0.999 level (df -> value)
CHI2_999 = {2: 13.815510557964274, 6: 22.457744484825323, 9: 27.877164871256568, 99: 148.23035916510173}


def make_profile(kind="exponential", **kw):
    base = dict(
        id=1,
        name="r",
        frequency_ghz=2.4,
        bandwidth_hz=1e6,
        max_power_w=1.0,
        noise_psd_w_per_hz=1e-15,
        model_kind=kind,
        price_per_bit=1e-6,
    )
    if kind in (ModelKind.EXPONENTIAL, "exponential"):
        base["pathloss_exponents"] = (2.0, None)
    elif kind in (ModelKind.DIRECTIONAL_MMWAVE, "directional_mmwave"):
        base["pathloss_exponents"] = (2.0, 4.0)
    base.update(kw)
    return RatRadioProfile(**base)


def chi_square(counts):
    counts = np.asarray(counts, dtype=np.float64)
    expected = counts.sum() / counts.size
    return float(np.sum((counts - expected) ** 2 / expected))


@pytest.fixture(scope="session")
def paper_cfg():
    return load_paper_config()


@pytest.fixture(scope="session")
def toy_cfg():
    return load_config(TOY_CONFIG)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def unit_norm():
    return NormalizationSpec(r_max=1.0, c_max=1.0)


def random_qos(rng, n):
    alpha = rng.uniform(0, 1, n)
    return [EdQosProfile(float(r), float(a), float(1.0 - a)) for r, a in zip(rng.uniform(1e3, 1e5, n), alpha)]


# acceptance criteria report: number -> (passed, detail)
CRITERIA = {}


def record_criterion(number, name, passed, detail=""):
    CRITERIA[number] = (name, bool(passed), detail)
    print(f"criterion {number:2d} {'PASS' if passed else 'FAIL'}: {name} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        name, passed, detail = CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d} {'PASS' if passed else 'FAIL'}: {name} {detail}")
