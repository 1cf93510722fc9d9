"""Builds the extension module and exercises it end to end.

Usage: python3 python/smoke_test.py [--no-build]
"""

import json
import shutil
import subprocess
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def build():
    subprocess.run(
        ["cargo", "build", "-p", "tilevault-py", "--features", "extension-module"],
        cwd=ROOT,
        check=True,
    )


def load_module(workdir):
    lib = ROOT / "target" / "debug" / "libtilevault_py.so"
    shutil.copy(lib, Path(workdir) / "tilevault_py.so")
    sys.path.insert(0, str(workdir))
    import tilevault_py

    return tilevault_py


def write_pgm(path, width, height, pixels):
    path.write_bytes(b"P5\n%d %d\n255\n" % (width, height) + bytes(pixels))


def main():
    if "--no-build" not in sys.argv:
        build()
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        tv = load_module(tmp)

        key = tv.tile_from_utm(10, 553200.0, 4182600.0)
        assert (key.scene, key.scale, key.x, key.y) == (10, 10, 2766, 20913), key
        assert key.query_string() == "T=1&S=10&Z=10&X=2766&Y=20913"
        assert [tv.scale_of_resolution(2.0**k) for k in (-10, 0, 12)] == [0, 10, 22]

        pixels = [(x * 7 + y * 3) % 250 for y in range(400) for x in range(400)]
        write_pgm(tmp / "scene.pgm", 400, 400, pixels)
        manifest = {
            "media_id": "SMOKE-1",
            "theme": 1,
            "kind": "projected",
            "images": [
                {
                    "file": "scene.pgm",
                    "format": "pgm",
                    "resolution_m": 1.0,
                    "utm": {"zone": 10, "top_left_easting": 553200, "top_left_northing": 4182600},
                    "acquisition_date": "1998-06-24",
                }
            ],
        }
        (tmp / "scene.json").write_text(json.dumps(manifest))

        store = tv.Store(str(tmp / "store"))
        report = store.cut(str(tmp / "scene.json"))
        assert report["written"] == 4 and not report["duplicate"], report
        assert store.cut(str(tmp / "scene.json"))["duplicate"]
        assert store.scale(1) == 1
        assert len(store.tiles(1, 16)) == 1

        tile = tv.Raster.decode(store.get_tile(key))
        assert (tile.width, tile.height) == (200, 200)
        assert tile.pixels() == bytes(pixels[y * 400 + x] for y in range(200) for x in range(200))

        parent = tv.Raster.decode(store.get_tile(tv.parent(key)))
        kids = [store.get_tile(k) for k in tv.children(tv.parent(key))]
        expect = tv.downsample_2x2([tv.Raster.decode(k) if k else None for k in kids])
        assert parent.pixels() == expect.pixels()

        lat, lon = tv.utm_to_latlon(10, 553300.0, 4182500.0)
        assert store.search_tile(lat, lon) == key
        assert store.fsck() == (True, [])

        gaz = tv.Gazetteer()
        added, rejected = gaz.import_tsv(
            "United States\tcountry\t\t\t\n"
            "California\tstate\tUnited States\t\t\n"
            f"Spot\tplace\tUnited States/California\t{lat}\t{lon}\n"
            "The Spot\talt_place\tSpot\t\t\n"
        )
        assert (added, rejected) == (2, []), rejected
        assert gaz.search("the spot")[0][1] == "Spot"
        caption, km, wind = gaz.nearest(lat + 0.05, lon)
        assert wind == "N" and caption == "6 Km N of Spot, California, United States", caption

    print("smoke test passed")


if __name__ == "__main__":
    main()
