"""Writes golden image-op fixtures for crates/core/tests/golden.rs.

Every expected buffer is computed here from the operation definitions,
independently of the Rust code. Geometric cases are rejected if any
inverse-mapped coordinate lands within 1e-6 of a rounding boundary, so the
fixtures do not depend on last-bit floating point agreement.

Fixture layout: 16-byte little-endian header (height, width, channels, label)
followed by HWC pixel bytes. golden.json lists the cases.
"""

import json
import math
import struct
from fractions import Fraction
from pathlib import Path

import numpy as np

OUT = Path(__file__).resolve().parent.parent / "crates" / "core" / "tests" / "fixtures"
FILL = 128
MARGIN = 1e-6


def write_image(path, img, label):
    h, w, c = img.shape
    path.write_bytes(struct.pack("<4I", h, w, c, label) + img.astype(np.uint8).tobytes())


def round_half_up(x):
    return math.floor(x + 0.5)


def posterize(img, lam):
    bits = min(8, max(4, round_half_up(8 - 4 * lam)))
    keep = 0xFF ^ ((1 << (8 - bits)) - 1)
    return img & keep


def solarize(img, lam):
    threshold = round_half_up(256 * (1 - lam))
    return np.where(img.astype(int) >= threshold, 255 - img.astype(int), img.astype(int))


def equalize(img):
    out = np.empty_like(img)
    for ch in range(img.shape[2]):
        plane = img[:, :, ch].ravel().tolist()
        n = len(plane)
        counts = [plane.count(v) for v in range(256)]
        first = next(c for c in counts if c > 0)
        if first == n:
            out[:, :, ch] = img[:, :, ch]
            continue
        table = []
        running = 0
        for v in range(256):
            running += counts[v]
            exact = Fraction(max(running - first, 0) * 255, n - first)
            if counts[v] and exact.denominator == 2:
                raise ValueError("equalize tie at a half level")
            table.append(math.floor(exact + Fraction(1, 2)))
        out[:, :, ch] = np.array([table[v] for v in plane]).reshape(img.shape[:2])
    return out


def resample(img, inverse):
    """inverse(x, y) -> source (sx, sy) as floats."""
    h, w, c = img.shape
    out = np.full_like(img, FILL)
    for y in range(h):
        for x in range(w):
            sx, sy = inverse(x, y)
            for v in (sx, sy):
                frac = v - math.floor(v)
                if abs(frac - 0.5) < MARGIN:
                    raise ValueError(f"coordinate {v} too close to a rounding boundary")
            ix, iy = math.floor(sx + 0.5), math.floor(sy + 0.5)
            if 0 <= ix < w and 0 <= iy < h:
                out[y, x] = img[iy, ix]
    return out


def translate(img, lam, axis):
    h, w, _ = img.shape
    frac = (2 * lam - 1) * 0.3125
    if axis == "x":
        off = frac * w
        return resample(img, lambda x, y: (x - off, y))
    off = frac * h
    return resample(img, lambda x, y: (x, y - off))


def shear(img, lam, axis):
    h, w, _ = img.shape
    s = (2 * lam - 1) * 0.3
    if axis == "x":
        cy = (h - 1) / 2
        # forward x' = x + s (y - cy), y' = y
        return resample(img, lambda x, y: (x - s * (y - cy), y))
    cx = (w - 1) / 2
    return resample(img, lambda x, y: (x, y - s * (x - cx)))


def rotate_degrees(img, degrees):
    h, w, _ = img.shape
    cx, cy = (w - 1) / 2, (h - 1) / 2
    t = math.radians(degrees)
    # counter-clockwise as displayed (y grows downwards): undo by turning clockwise
    def inverse(x, y):
        dx, dy = x - cx, y - cy
        return cx + math.cos(t) * dx - math.sin(t) * dy, cy + math.sin(t) * dx + math.cos(t) * dy

    return resample(img, inverse)


def rotate(img, lam):
    return rotate_degrees(img, (2 * lam - 1) * 30)


def rot90_exact(img):
    """Quarter turn counter-clockwise as displayed, by index permutation."""
    return np.rot90(img, k=1, axes=(0, 1))


def build(seed):
    rng = np.random.RandomState(seed)
    inputs = {
        "gray": (rng.randint(0, 256, size=(8, 8, 1)).astype(np.uint8), 3),
        "rgb": (rng.randint(0, 256, size=(6, 9, 3)).astype(np.uint8), 1),
        "square": (rng.randint(0, 256, size=(5, 5, 1)).astype(np.uint8), 0),
    }
    halves = np.array([50] * 32 + [200] * 32, dtype=np.uint8)
    inputs["halves"] = (rng.permutation(halves).reshape(8, 8, 1), 2)

    cases = []

    def add(inp, op, lam, expected):
        name = f"{inp}__{op}_{lam}.bin" if lam is not None else f"{inp}__{op}.bin"
        cases.append((inp, op, lam, name, expected))

    for key in ("gray", "rgb", "halves"):
        img = inputs[key][0]
        for lam in (0.5, 1.0):
            add(key, "Posterize", lam, posterize(img, lam))
        for lam in (0.3, 0.75):
            add(key, "Solarize", lam, solarize(img, lam))
        add(key, "Equalize", None, equalize(img))
    for key in ("gray", "rgb"):
        img = inputs[key][0]
        add(key, "TranslateX", 0.7, translate(img, 0.7, "x"))
        add(key, "TranslateY", 0.25, translate(img, 0.25, "y"))
        add(key, "ShearX", 0.9, shear(img, 0.9, "x"))
        add(key, "ShearY", 0.15, shear(img, 0.15, "y"))
        add(key, "Rotate", 0.9, rotate(img, 0.9))
        add(key, "Rotate", 0.2, rotate(img, 0.2))
    add("square", "Rotate90", None, rot90_exact(inputs["square"][0]))
    return inputs, cases


def main():
    # Random inputs can hit an exact rounding tie; move to the next seed until none does.
    seed = 20240601
    while True:
        try:
            inputs, built = build(seed)
            break
        except ValueError as err:
            print(f"seed {seed}: {err}")
            seed += 1
    OUT.mkdir(parents=True, exist_ok=True)
    for key, (img, label) in inputs.items():
        write_image(OUT / f"{key}.bin", img, label)
    cases = []
    for inp, op, lam, name, expected in built:
        write_image(OUT / name, expected, inputs[inp][1])
        cases.append({"input": f"{inp}.bin", "op": op, "lambda": lam, "expected": name})
    (OUT / "golden.json").write_text(json.dumps({"cases": cases}, indent=2) + "\n")
    print(f"wrote {len(cases)} cases to {OUT}")


if __name__ == "__main__":
    main()
