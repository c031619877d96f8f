"""Point-cloud checkpoints in the common Gaussian-splat PLY layout.

Vertices carry x/y/z, zero normals, DC color coefficients (f_dc_0..2),
raw opacity, log scales (scale_0..2) and the raw quaternion (rot_0..3),
extended with three custom properties smgs_alpha, smgs_beta, smgs_gamma
holding the raw competition parameters. Files written by other splat tools
lack the smgs_* properties; the reader then falls back to this package's
defaults (alpha=1, beta=1, gamma=10).

Colors here are sigmoid-activated, so they are converted to/from DC
coefficients (color = 0.5 + C0 * f_dc) for interchange; out-of-range values
are clipped into the open unit interval on load.
"""

from __future__ import annotations

import numpy as np

from .scene import (DEFAULT_RAW_BETA, DEFAULT_RAW_GAMMA, GaussianCloud,
                    logit, sigmoid)

SH_C0 = 0.28209479177387814

_PROPS = (["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2",
           "opacity", "scale_0", "scale_1", "scale_2",
           "rot_0", "rot_1", "rot_2", "rot_3",
           "smgs_alpha", "smgs_beta", "smgs_gamma"])

_PLY_TYPES = {"float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
              "uchar": "u1", "uint8": "u1", "char": "i1", "int8": "i1",
              "short": "<i2", "ushort": "<u2", "int": "<i4", "int32": "<i4",
              "uint": "<u4", "uint32": "<u4"}


def save_ply(path, cloud: GaussianCloud):
    """Write the cloud as binary little-endian PLY."""
    n = len(cloud)
    color = sigmoid(cloud.colors)
    f_dc = (color - 0.5) / SH_C0
    data = np.empty((n, len(_PROPS)), dtype=np.float32)
    data[:, 0:3] = cloud.means
    data[:, 3:6] = 0.0
    data[:, 6:9] = f_dc
    data[:, 9] = cloud.raw_opacities
    data[:, 10:13] = cloud.log_scales
    data[:, 13:17] = cloud.rotations
    data[:, 17] = cloud.raw_alphas
    data[:, 18] = cloud.raw_betas
    data[:, 19] = cloud.raw_gammas
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {p}" for p in _PROPS]
    header += ["end_header"]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(np.ascontiguousarray(data).tobytes())


def load_ply(path) -> GaussianCloud:
    """Read a Gaussian-splat PLY; tolerates extra/missing optional properties."""
    with open(path, "rb") as fh:
        raw = fh.read()
    end = raw.find(b"end_header")
    if raw[:3] != b"ply" or end < 0:
        raise ValueError(f"{path} is not a PLY file")
    header = raw[:end].decode("ascii", errors="replace").splitlines()
    body = raw[end:]
    body = body[body.find(b"\n") + 1:]
    fmt = next((ln.split()[1] for ln in header if ln.startswith("format")), "")
    if fmt != "binary_little_endian":
        raise ValueError(f"unsupported PLY format {fmt!r}")
    n = None
    fields = []
    in_vertex = False
    for ln in header:
        parts = ln.split()
        if not parts:
            continue
        if parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                n = int(parts[2])
        elif parts[0] == "property" and in_vertex:
            if parts[1] == "list":
                raise ValueError("list properties are not supported in vertex data")
            fields.append((parts[2], _PLY_TYPES[parts[1]]))
    if n is None:
        raise ValueError("no vertex element in PLY header")
    dtype = np.dtype(fields)
    arr = np.frombuffer(body, dtype=dtype, count=n)

    def col(name, default=None):
        if name in arr.dtype.names:
            return np.asarray(arr[name], dtype=np.float64)
        if default is None:
            raise ValueError(f"PLY is missing required property {name!r}")
        return np.full(n, default, dtype=np.float64)

    means = np.stack([col("x"), col("y"), col("z")], axis=1)
    log_scales = np.stack([col(f"scale_{i}") for i in range(3)], axis=1)
    rotations = np.stack([col(f"rot_{i}") for i in range(4)], axis=1)
    f_dc = np.stack([col(f"f_dc_{i}", 0.0) for i in range(3)], axis=1)
    color = np.clip(0.5 + SH_C0 * f_dc, 1e-4, 1.0 - 1e-4)
    return GaussianCloud(
        means=means, log_scales=log_scales, rotations=rotations,
        raw_opacities=col("opacity"), colors=logit(color),
        raw_alphas=col("smgs_alpha", 0.0),
        raw_betas=col("smgs_beta", DEFAULT_RAW_BETA),
        raw_gammas=col("smgs_gamma", DEFAULT_RAW_GAMMA),
        metadata={"source": str(path)},
    )
