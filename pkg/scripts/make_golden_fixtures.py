"""Regenerate tests/fixtures/golden_<cam>.cvsg (one container per CAM)."""

import sys
from pathlib import Path

root = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(root / "tests"))

import golden  # noqa: E402
from covmon import store  # noqa: E402

out = root / "tests" / "fixtures"
out.mkdir(exist_ok=True)
for cam, sig in golden.signatures().items():
    path = out / f"golden_{cam}.cvsg"
    size = store.write_signature(sig, path, golden.thresholds(sig))
    print(f"{path.relative_to(root)}  {size} bytes")
