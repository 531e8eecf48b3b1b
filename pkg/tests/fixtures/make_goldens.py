"""Regenerate the golden files used by the CLI regression tests.

Run from the repository root:

    python3 tests/fixtures/make_goldens.py

The goldens pin the exact numeric output of two deterministic CLI flows
(default model generation -> calibration -> rewrite trace). The tests
compare parsed JSON, so regenerate them only when the underlying
behavior is meant to change, and commit the diff deliberately.
"""

import tempfile
from pathlib import Path

from sere import cli

HERE = Path(__file__).resolve().parent
GOLDEN = HERE / "golden"


def main() -> None:
    GOLDEN.mkdir(exist_ok=True)
    with tempfile.TemporaryDirectory() as raw:
        tmp = Path(raw)
        model_dir = tmp / "model"
        sims_dir = tmp / "sims"
        assert cli.main(["gen-model", "--seed", "0", "-o", str(model_dir)]) == 0
        assert (
            cli.main(
                [
                    "calibrate",
                    "--model",
                    str(model_dir),
                    "--metric",
                    "frobenius",
                    "--calib",
                    "gaussian:0",
                    "-o",
                    str(sims_dir),
                ]
            )
            == 0
        )
        for l in range(2):
            src = sims_dir / f"sim.layer{l}.json"
            (GOLDEN / f"calibrate_sim.layer{l}.json").write_text(src.read_text())
        trace = tmp / "trace.json"
        assert (
            cli.main(
                [
                    "reroute",
                    "--model",
                    str(model_dir),
                    "--sims",
                    str(sims_dir),
                    "--retain",
                    "1",
                    "--threshold",
                    "0.3",
                    "--batch-size",
                    "8",
                    "--seed",
                    "0",
                    "-o",
                    str(trace),
                ]
            )
            == 0
        )
        (GOLDEN / "reroute_trace.json").write_text(trace.read_text())
    print(f"golden files written to {GOLDEN}")


if __name__ == "__main__":
    main()
