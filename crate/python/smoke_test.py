"""Smoke test for the periodic_mdp extension module.

Imports an installed build if there is one; otherwise builds the extension
with cargo and loads it from a temporary directory.
"""

import importlib
import os
import shutil
import subprocess
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def load():
    try:
        return importlib.import_module("periodic_mdp")
    except ImportError:
        pass
    subprocess.run(
        ["cargo", "build", "--release", "-p", "periodic-mdp-python", "--features", "extension-module"],
        cwd=ROOT,
        check=True,
    )
    target = Path(os.environ.get("CARGO_TARGET_DIR", ROOT / "target")) / "release"
    lib = next(p for p in target.iterdir() if p.name.startswith("libperiodic_mdp.") and p.suffix in (".so", ".dylib"))
    where = Path(tempfile.mkdtemp())
    shutil.copy(lib, where / "periodic_mdp.so")
    sys.path.insert(0, str(where))
    return importlib.import_module("periodic_mdp")


def main():
    pm = load()
    assert "max-entropy-small" in pm.presets()

    sim = pm.simulate("max-entropy-small", "k", episodes=5, seed=1)
    assert len(sim["regret_cum"]) == 5
    assert sim["rho_gap_l1"][0] == 0.0

    with tempfile.TemporaryDirectory() as out:
        summary = pm.run("[protocol]\nnum_episodes = 5\nseed = 1\n", out_dir=out)
        ledger = pm.read_ledger(os.path.join(out, "ledger.csv"))
        assert ledger["episode"] == [1, 2, 3, 4, 5]
        assert ledger["regret_cum"][-1] == summary["final_regret"]
        assert os.path.exists(os.path.join(out, "regret.svg"))

    try:
        pm.simulate("nowhere")
    except ValueError as e:
        assert "nowhere" in str(e)
    else:
        raise AssertionError("unknown preset accepted")

    tables = pm.oracle_tables(quick=True, seed=1)
    assert all(passed for _, passed, _ in tables), [t for t, p, _ in tables if not p]
    print(f"periodic_mdp {pm.__version__}: smoke test passed")


if __name__ == "__main__":
    main()
