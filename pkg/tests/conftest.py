"""Shared synthetic systems for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from spinlat.core import Geometry, GTensor, ModeSet, SpinSystem

# outcome per acceptance criterion, printed as a summary table at the end
_ACCEPTANCE: dict[str, str] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    interesting = report.when == "call" or (
        report.when == "setup" and report.outcome == "skipped"
    )
    if not interesting:
        return
    name = report.nodeid.split("::test_criterion_")[1].split("[")[0]
    outcome = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}.get(
        report.outcome, report.outcome.upper()
    )
    _ACCEPTANCE[name] = outcome


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE):
        number, label = name.split("_", 1)
        terminalreporter.write_line(
            f"ACCEPTANCE {number} {label.replace('_', '-')} {_ACCEPTANCE[name]}"
        )


# Published reference g matrix for the vanadyl-type center used as a
# cross-check target throughout the suite.
REFERENCE_G = np.array(
    [
        [1.981, 3.923e-3, 2.134e-3],
        [3.897e-3, 1.989, -8.711e-4],
        [2.119e-3, -8.722e-4, 1.990],
    ]
)


def make_geometry(natoms: int = 3, seed: int = 7) -> Geometry:
    rng = np.random.default_rng(seed)
    symbols = tuple(["H", "O", "H", "C", "N", "V"][i % 6] for i in range(natoms))
    masses = np.array([1.008, 15.999, 1.008, 12.011, 14.007, 50.942])[
        np.arange(natoms) % 6
    ]
    positions = rng.normal(scale=1.2, size=(natoms, 3))
    return Geometry(symbols=symbols, masses=masses, positions=positions)


def make_modeset(
    natoms: int = 3,
    nmodes: int = 3,
    frequencies=None,
    seed: int = 11,
) -> ModeSet:
    """Random orthonormal eigenvector columns over a small geometry."""
    geom = make_geometry(natoms=natoms, seed=seed)
    rng = np.random.default_rng(seed + 1)
    q, _ = np.linalg.qr(rng.normal(size=(3 * natoms, 3 * natoms)))
    vecs = q[:, :nmodes]
    if frequencies is None:
        frequencies = np.linspace(12.6, 210.0, nmodes)
    freqs = np.asarray(frequencies, dtype=float)
    return ModeSet(geometry=geom, frequencies=freqs, eigenvectors=vecs)


@pytest.fixture
def toy_modes() -> ModeSet:
    return make_modeset(natoms=3, nmodes=3, frequencies=[12.6, 45.0, 210.0])


@pytest.fixture
def reference_spin() -> SpinSystem:
    return SpinSystem(
        g0=GTensor(REFERENCE_G), field_mt=np.array([0.0, 0.0, 1266.0])
    )
