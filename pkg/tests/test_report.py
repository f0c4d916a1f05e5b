import numpy as np

from transvert import report


def is_png(path):
    return path.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_loss_curves(tmp_path):
    rows = [{"step": s, "loss_g": 1 / s, "loss_d": 0.5, "l1_term": 0.1 / s, "adv_term": 0.2} for s in range(1, 20)]
    assert is_png(report.loss_curves(rows, tmp_path / "l.png"))


def test_ablation_bars(tmp_path):
    rows = [
        {"table": "table1", "row": "A", "dice_mean": 0.8, "reference_dice_pct": 95.5},
        {"table": "table2", "row": "B", "dice_mean": float("nan"), "reference_dice_pct": 76.4},
    ]
    assert is_png(report.ablation_bars(rows, tmp_path / "a.png"))


def test_view_panels_and_chamfer_map(tmp_path):
    rng = np.random.default_rng(0)
    assert is_png(report.view_panels([rng.random((8, 8)), rng.random((8, 8))], tmp_path / "v.png", ["a", "b"]))
    pts = rng.random((50, 3))
    assert is_png(report.chamfer_map(pts, rng.random(50), tmp_path / "c.png", "t"))
