"""Shared fixtures for the full-scale tests.

The fine-grid datasets (N = 1000) take about 20 minutes to integrate, so they
are stored under ``$DISCFILTER_TEST_CACHE`` (default: a folder in the system
temp directory). The cache key covers the generation settings and the source
of every module that shapes the data, so stale entries are never reused.
"""

import hashlib
import os
import shutil
import tempfile
from dataclasses import dataclass
from pathlib import Path

import pytest

import discfilter
from discfilter import dns, filterbank, io, stencils
from discfilter.dns import SnapshotSet, generate_dataset
from discfilter.evaluation import convergence_sweep, fit_cell, long_horizon_study
from discfilter.filterbank import build_filter_matrix
from discfilter.stencils import make_grid

# Reduced train and long sets; valid and test keep their table sizes.
FULL_CONFIG = io.ExperimentConfig(train_n_ic=200, long_n_ic=10)
FULL_M = 100


def cache_root() -> Path:
    default = Path(tempfile.gettempdir()) / "discfilter-test-cache"
    return Path(os.environ.get("DISCFILTER_TEST_CACHE", default))


def _cache_key(name: str, cfg: io.ExperimentConfig) -> str:
    h = hashlib.sha256()
    h.update(f"{name}\n{cfg.to_text()}\n{discfilter.__version__}".encode())
    for module in (dns, filterbank, stencils):
        h.update(Path(module.__file__).read_bytes())
    return h.hexdigest()[:16]


def cached_dataset(name: str, cfg: io.ExperimentConfig = FULL_CONFIG) -> SnapshotSet:
    """Fine-grid dataset ``name`` (filtered with the top-hat at M = 100), cached."""
    folder = cache_root() / f"{name}-{_cache_key(name, cfg)}"
    if (folder / "manifest.txt").is_file():
        try:
            return io.load_dataset(folder, need_fine=True)
        except (OSError, ValueError):
            shutil.rmtree(folder, ignore_errors=True)
    fine = make_grid(cfg.N)
    W = build_filter_matrix(cfg.filter_spec("tophat"), make_grid(FULL_M), fine)
    n_IC, n_t, T = cfg.dataset_size(name)
    ds = generate_dataset(name, fine, W, cfg.ic_spec(), cfg.solver(), n_IC=n_IC, n_t=n_t,
                          T=T)
    # write next to the target and rename, so an interrupted run leaves no half entry
    partial = folder.with_name(folder.name + f".tmp{os.getpid()}")
    io.save_dataset(partial, ds, {"T": T})
    os.replace(partial, folder)
    return ds


@dataclass
class FullScaleData:
    train: SnapshotSet
    valid: SnapshotSet
    test: SnapshotSet
    long: SnapshotSet
    cfg: io.ExperimentConfig


@pytest.fixture(scope="session")
def full() -> FullScaleData:
    return FullScaleData(*(cached_dataset(name) for name in ("train", "valid", "test", "long")),
                     FULL_CONFIG)


SWEEP_M = (20, 40, 100, 150, 200)
FILTERS = ("tophat", "gaussian")


@pytest.fixture(scope="session")
def full_sweep(full):
    """Intrusive and derivative-fit sweep over both filters, operators kept."""
    filters = {name: full.cfg.filter_spec(name) for name in FILTERS}
    return convergence_sweep(SWEEP_M, ["intrusive", "df"], filters, full.train,
                             full.valid, full.test, fine=make_grid(full.cfg.N),
                             keep_operators=True)


@dataclass
class LongStudy:
    W: object
    train: SnapshotSet
    valid: SnapshotSet
    long: SnapshotSet
    ops: dict
    curves: dict


@pytest.fixture(scope="session")
def long_study(full):
    """``long_study(kind)``: closed-form routes at M = 100 on the long set."""
    done = {}

    def study(kind):
        if kind not in done:
            fine, coarse = make_grid(full.cfg.N), make_grid(FULL_M)
            W = build_filter_matrix(full.cfg.filter_spec(kind), coarse, fine)
            tr = full.train.filtered_with(W)
            va = full.valid.filtered_with(W, keep_fine=False)
            lo = full.long.filtered_with(W, keep_fine=False)
            ops = {r: fit_cell(r, tr, va, W, fine, coarse).best
                   for r in ("baseline", "intrusive", "df")}
            done[kind] = LongStudy(W, tr, va, lo, ops, long_horizon_study(ops, lo))
        return done[kind]

    return study


# Acceptance reporting ----------------------------------------------------------

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed):
        return
    number, title = mark.args
    details = [str(v) for k, v in item.user_properties if k == "detail"]
    _CRITERIA[number] = (title, rep.passed, "; ".join(details))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, ok, detail = _CRITERIA[number]
        line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {title}"
        terminalreporter.write_line(line + (f" [{detail}]" if detail else ""))
