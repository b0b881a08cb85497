import json
import math
import struct
import subprocess

from conftest import CONFIG, ROOT


def run(binary, *args):
    return subprocess.run([binary, *map(str, args)], capture_output=True, text=True, timeout=120)


def write_pgm(path, width, height, values, maxval=65535):
    header = f"P5\n{width} {height}\n{maxval}\n".encode()
    body = b"".join(struct.pack(">H", max(0, min(maxval, round(v)))) for v in values)
    path.write_bytes(header + body)


def gaussian(width, height, pitch, cx, cy, sigma, peak):
    out = []
    for y in range(height):
        for x in range(width):
            dx = (x + 0.5) * pitch - cx
            dy = (y + 0.5) * pitch - cy
            out.append(peak * math.exp(-0.5 * (dx * dx + dy * dy) / sigma ** 2))
    return out


def test_usage_errors_exit_2(binary):
    assert run(binary).returncode == 2
    assert run(binary, "simulate", "--config", CONFIG).returncode == 2
    assert run(binary, "frobnicate").returncode == 2
    assert run(binary, "--help").returncode == 0


def test_simulate_is_deterministic(binary, tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    ra = run(binary, "simulate", "--config", CONFIG, "--preset", "fig7-line", "--out", a, "--seed", 9)
    rb = run(binary, "simulate", "--config", CONFIG, "--preset", "fig7-line", "--out", b, "--seed", 9)
    assert ra.returncode == 0 and rb.returncode == 0
    assert a.read_bytes() == b.read_bytes()
    summary = json.loads(ra.stdout)
    assert summary["points"] == 31 and summary["seed"] == 9
    assert f"# config_hash: {summary['config_hash']}" in a.read_text()


def test_simulate_validation_exit_2(binary, tmp_path):
    r = run(binary, "simulate", "--config", CONFIG, "--preset", "nope", "--out", tmp_path / "x.csv")
    assert r.returncode == 2 and "unknown preset" in r.stderr
    bad = tmp_path / "bad.json"
    bad.write_text('{"electrical": {"cable_capacitance_pf": -1}}')
    r = run(binary, "simulate", "--config", bad, "--preset", "fig7-line", "--out", tmp_path / "x.csv")
    assert r.returncode == 2 and "cable_capacitance_pf" in r.stderr


def test_fit_spot_reports_four_sigma(binary, tmp_path):
    img = tmp_path / "spot.pgm"
    write_pgm(img, 64, 64, gaussian(64, 64, 5.0, 160.0, 155.0, 42.5, 40000.0))
    r = run(binary, "fit-spot", img, "--pitch-um", 5)
    assert r.returncode == 0, r.stderr
    fit = json.loads(r.stdout)
    assert abs(fit["diameter_major_um"] - 170.0) < 0.9
    assert abs(fit["diameter_minor_um"] - 170.0) < 0.9

    flat = tmp_path / "flat.pgm"
    write_pgm(flat, 16, 16, [100.0] * 256)
    assert run(binary, "fit-spot", flat, "--pitch-um", 5).returncode == 3
    assert run(binary, "fit-spot", img, "--pitch-um", -1).returncode == 2


def test_calibrate_and_steer_pipeline(binary, tmp_path):
    scan_csv = tmp_path / "closed.csv"
    model = tmp_path / "model.json"
    r = run(binary, "simulate", "--config", CONFIG, "--preset", "closed-loop", "--out", scan_csv)
    assert r.returncode == 0, r.stderr
    r = run(binary, "calibrate", scan_csv, "--mask", ROOT / "config" / "masks" / "screen_3x3.txt", "--out", model)
    assert r.returncode == 0, r.stderr
    summary = json.loads(r.stdout)
    assert summary["blobs"] == 9 and summary["matches"] == 9 and summary["kappa_fitted"]
    doc = json.loads(model.read_text())
    assert doc["format"] == "cryoscan-mapping/1"
    assert json.loads(subprocess.check_output([binary, "simulate", "--config", CONFIG, "--preset", "closed-loop",
                                               "--out", tmp_path / "again.csv"]))["config_hash"] in doc["provenance"]

    r = run(binary, "steer", "--model", model, "--to-mm", 2, 2, "--config", CONFIG)
    assert r.returncode == 0, r.stderr
    out = json.loads(r.stdout)
    assert math.hypot(out["traced_mm"][0] - 2, out["traced_mm"][1] - 2) < 0.1

    r = run(binary, "steer", "--model", model, "--to-mm", 80, 0)
    assert r.returncode == 3
    err = json.loads(r.stdout)
    assert err["error"] == "out_of_range" and all(abs(v) <= 1 for v in err["nearest_v"])

    r = run(binary, "calibrate", scan_csv, "--mask", ROOT / "config" / "masks" / "fig5_hole.txt", "--out", model)
    assert r.returncode == 3


def test_serve_rejects_bad_config(binary, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"colour": 1}')
    r = run(binary, "serve", "--config", bad, "--port", 0)
    assert r.returncode == 2 and "colour" in r.stderr
