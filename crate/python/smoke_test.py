#!/usr/bin/env python3
"""Smoke test for the uvcamo_py extension module.

Builds the PyO3 cdylib with cargo, loads it, and exercises the main types
and operations end to end on tiny inputs. Exits nonzero on any failure.
"""

import math
import shutil
import subprocess
import sys
import tempfile
from pathlib import Path

REPO_ROOT = Path(__file__).resolve().parent.parent


def build_extension(tmp: Path) -> Path:
    subprocess.run(
        ["cargo", "build", "-p", "uvcamo-py"],
        cwd=REPO_ROOT,
        check=True,
    )
    candidates = [
        REPO_ROOT / "target" / "debug" / name
        for name in ("libuvcamo_py.so", "libuvcamo_py.dylib", "uvcamo_py.dll")
    ]
    built = next(p for p in candidates if p.exists())
    dest = tmp / "uvcamo_py.so"
    shutil.copy(built, dest)
    return dest


def main() -> None:
    tmp = Path(tempfile.mkdtemp(prefix="uvcamo_smoke_"))
    build_extension(tmp)
    sys.path.insert(0, str(tmp))
    import uvcamo_py as uv

    # mesh: builtin car and OBJ roundtrip
    mesh = uv.Mesh.builtin_car()
    assert mesh.num_vertices == 16, mesh.num_vertices
    assert mesh.num_faces == 24, mesh.num_faces
    obj_path = tmp / "car.obj"
    mesh.save(obj_path)
    back = uv.Mesh.load(obj_path)
    assert back.num_faces == mesh.num_faces
    cx, cy, cz = mesh.centroid()
    assert abs(cx) < 1.0 and abs(cy) < 1e-9

    # texture: construction, PNG roundtrip, validation
    tex = uv.Texture.random(8, 8, seed=3)
    assert tex.resolution == (8, 8)
    png_path = tmp / "tex.png"
    tex.save(png_path)
    again = uv.Texture.load(png_path)
    assert again.resolution == (8, 8)
    solid = uv.Texture.solid(4, 4, (0.9, 0.1, 0.2))
    assert max(abs(a - b) for a, b in zip(solid.data()[:3], [0.9, 0.1, 0.2])) < 1e-12
    try:
        uv.Texture.from_data(2, 2, [2.0] * 12)
    except ValueError:
        pass
    else:
        raise AssertionError("out-of-range texture accepted")

    # camera pose validation
    pose = uv.Pose(30.0, 25.0, 8.0)
    assert pose.azimuth_deg == 30.0
    try:
        uv.Pose(0.0, 120.0, 5.0)
    except ValueError:
        pass
    else:
        raise AssertionError("invalid elevation accepted")

    # rendering, with and without weather
    render = uv.render(mesh, tex, pose, 64)
    sil = render.silhouette()
    covered = sum(1 for v in sil if v == 1.0)
    assert 0 < covered < 64 * 64, covered
    finite_depths = [d for d in render.depth() if math.isfinite(d)]
    assert len(finite_depths) == covered
    foggy = uv.render(mesh, tex, pose, 64, weather=uv.Weather(30.0, 90.0))
    assert len(foggy.color()) == 64 * 64 * 3

    # losses
    assert abs(uv.iou((0, 0, 2, 2), (1, 1, 3, 3)) - 1.0 / 7.0) < 1e-12
    assert uv.iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0

    # detector forward on a rendered scene
    det = uv.Detector.fresh(seed=0)
    boxes = det.detect(render.color(), 64, 64)
    for x1, y1, x2, y2, conf in boxes:
        assert x1 < x2 and y1 < y2 and 0.0 <= conf <= 1.0
    loss = det.attack_loss(render.color(), 64, 64, (10.0, 10.0, 50.0, 50.0))
    assert loss >= 0.0

    # EFE forward produces valid feature maps
    efe = uv.Efe.fresh(seed=1)
    mul, add = efe.feature_maps(render.color(), 64, 64)
    assert all(v >= 0.0 for v in mul)
    assert all(0.0 <= v <= 1.0 for v in add)

    # dataset generation through the bindings (tiny config)
    cfg = tmp / "tiny.toml"
    cfg.write_text(
        "\n".join(
            [
                "[dataset]",
                "image_size = 32",
                "sun_altitudes_deg = [30.0]",
                "fog_densities = [0.0]",
                "unseen_sun_altitudes_deg = [0.0]",
                "unseen_fog_densities = [40.0]",
                "max_efe_train = 2",
                "max_efe_test = 2",
                "max_det_train = 2",
                "max_det_test = 2",
                "max_texgen = 2",
                "max_eval_seen = 2",
                "max_eval_unseen = 2",
                "[dataset.efe_train_grid]",
                "azimuths_deg = [0.0]",
                "elevations_deg = [30.0]",
                "distances_m = [6.0]",
                "[dataset.efe_test_grid]",
                "azimuths_deg = [90.0]",
                "elevations_deg = [30.0]",
                "distances_m = [6.0]",
                "[dataset.det_train_grid]",
                "azimuths_deg = [0.0, 180.0]",
                "elevations_deg = [30.0]",
                "distances_m = [6.0]",
                "[dataset.det_test_grid]",
                "azimuths_deg = [45.0]",
                "elevations_deg = [30.0]",
                "distances_m = [6.0]",
                "[dataset.texgen_grid]",
                "azimuths_deg = [0.0]",
                "elevations_deg = [30.0]",
                "distances_m = [6.0]",
                "[dataset.eval_grid]",
                "azimuths_deg = [0.0]",
                "elevations_deg = [30.0]",
                "distances_m = [6.0]",
            ]
        )
    )
    n = uv.gen_dataset(tmp / "data", config=cfg, seed=5)
    assert n > 0, n
    assert (tmp / "data" / "manifest.json").exists()

    print("smoke test passed")


if __name__ == "__main__":
    main()
