#!/usr/bin/env python3
"""Write MNIST digits shipped in the `mnist` npm package as IDX files.

The package stores 10 000 digits as per-class JSON arrays of intensities in
[0, 1] rounded to three decimals; multiplying by 255 and rounding recovers the
original bytes. Classes are interleaved round-robin so that any prefix of the
output holds a balanced mix of digits.

    python3 scripts/mnist_from_npm.py --out /root/mnist
    python3 scripts/mnist_from_npm.py --package-dir /path/to/package --out DIR
"""

import argparse
import json
import pathlib
import struct
import subprocess
import tarfile
import tempfile

SIDE = 28


def fetch_package(workdir: pathlib.Path) -> pathlib.Path:
    out = subprocess.run(
        ["npm", "pack", "mnist@1.1.0", "--silent"],
        cwd=workdir,
        check=True,
        capture_output=True,
        text=True,
    )
    tarball = workdir / out.stdout.strip().splitlines()[-1]
    with tarfile.open(tarball) as tar:
        tar.extractall(workdir, filter="data")
    return workdir / "package"


def load_digits(package: pathlib.Path) -> list[list[bytes]]:
    classes = []
    for digit in range(10):
        raw = json.loads((package / "src" / "digits" / f"{digit}.json").read_text())["data"]
        if len(raw) % (SIDE * SIDE):
            raise ValueError(f"digit {digit}: payload length {len(raw)} is not a multiple of 784")
        pixels = bytes(min(255, max(0, round(v * 255))) for v in raw)
        classes.append([pixels[i : i + SIDE * SIDE] for i in range(0, len(pixels), SIDE * SIDE)])
    return classes


def interleave(classes: list[list[bytes]]) -> tuple[list[bytes], list[int]]:
    images, labels = [], []
    depth = max(len(c) for c in classes)
    for k in range(depth):
        for digit, items in enumerate(classes):
            if k < len(items):
                images.append(items[k])
                labels.append(digit)
    return images, labels


def write_idx(out: pathlib.Path, images: list[bytes], labels: list[int]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "t10k-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), SIDE, SIDE))
        for img in images:
            f.write(img)
    with open(out / "t10k-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--package-dir", type=pathlib.Path, help="unpacked npm package (fetched when omitted)")
    parser.add_argument("--out", type=pathlib.Path, required=True)
    args = parser.parse_args()
    with tempfile.TemporaryDirectory() as tmp:
        package = args.package_dir or fetch_package(pathlib.Path(tmp))
        images, labels = interleave(load_digits(package))
    write_idx(args.out, images, labels)
    print(f"wrote {len(images)} images to {args.out}")


if __name__ == "__main__":
    main()
