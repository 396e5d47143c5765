"""Scene assembly from a JSON config.

A scene config bundles the cage, the radiance field (voxel file or analytic
primitives), optional rigid / plane-split regions, the frame source (a
tetframe sequence, a rig with a parameter stream, or a single rest frame),
and render settings.  Relative paths resolve against the config file's
directory so scene bundles are relocatable.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import affine, anim, geometry
from .deform import PlaneSplitRegion, RigidRegion
from .errors import ConfigError, FormatError
from .field import (
    CompositeField,
    ConstantBox,
    ConstantSphere,
    GaussianBlob,
    ViewLobe,
    VoxelField,
)
from .geometry import DeformedState, TetCage
from .render import RenderConfig


def save_shell(path, vertices: np.ndarray, faces: np.ndarray) -> None:
    """Write `trishell v1`: closed triangle surface for region shells."""
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"trishell v1 {len(vertices)} {len(faces)}\n")
        for v in np.asarray(vertices, dtype=np.float64):
            f.write(f"v {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}\n")
        for t in np.asarray(faces, dtype=np.int64):
            f.write(f"f {t[0]} {t[1]} {t[2]}\n")


def load_shell(path):
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().split()
        if len(header) != 4 or header[0] != "trishell" or header[1] != "v1":
            raise FormatError(f"{path}: bad trishell header")
        nv, nf = int(header[2]), int(header[3])
        verts = np.empty((nv, 3), dtype=np.float64)
        faces = np.empty((nf, 3), dtype=np.int64)
        for i in range(nv):
            parts = f.readline().split()
            if len(parts) != 4 or parts[0] != "v":
                raise FormatError(f"{path}: bad vertex line {i}")
            verts[i] = [float(x) for x in parts[1:]]
        for i in range(nf):
            parts = f.readline().split()
            if len(parts) != 4 or parts[0] != "f":
                raise FormatError(f"{path}: bad face line {i}")
            faces[i] = [int(x) for x in parts[1:]]
    return verts, faces


def build_analytic_field(spec_list):
    """Analytic field from a list of primitive dicts."""
    prims = []
    for p in spec_list:
        lobe = None
        if p.get("lobe"):
            lb = p["lobe"]
            lobe = ViewLobe(
                axis=tuple(lb.get("axis", (0.0, 0.0, 1.0))),
                ambient=float(lb.get("ambient", 0.7)),
                strength=float(lb.get("strength", 0.3)),
                power=float(lb.get("power", 4.0)),
            )
        kind = p.get("kind")
        if kind == "box":
            prims.append(
                ConstantBox(
                    bounds=np.asarray(p["bounds"], dtype=np.float64).reshape(2, 3),
                    sigma=float(p["sigma"]),
                    color=tuple(p["color"]),
                    lobe=lobe,
                )
            )
        elif kind == "sphere":
            prims.append(
                ConstantSphere(
                    center=tuple(p["center"]),
                    radius=float(p["radius"]),
                    sigma=float(p["sigma"]),
                    color=tuple(p["color"]),
                    lobe=lobe,
                )
            )
        elif kind == "blob":
            prims.append(
                GaussianBlob(
                    center=tuple(p["center"]),
                    radius=float(p["radius"]),
                    sigma=float(p["sigma"]),
                    color=tuple(p["color"]),
                )
            )
        else:
            raise ConfigError(f"unknown analytic primitive kind {kind!r}")
    return CompositeField(prims)


@dataclass
class RegionSpec:
    """Parsed region definition plus its per-frame transform sources."""

    definition: object  # RigidRegion | PlaneSplitRegion
    kind: str
    transform: np.ndarray | None = None  # static canonical->deformed
    bone: int | None = None
    transform_bottom: np.ndarray | None = None
    bone_bottom: int | None = None

    def _resolve(self, static, bone, bones):
        if bone is not None:
            if bones is None or bone >= len(bones):
                raise ConfigError(f"region references bone {bone} but no rig pose provides it")
            return bones[bone]
        return static if static is not None else affine.identity()

    def posed(self, bones=None):
        if self.kind == "rigid":
            return self.definition.posed(self._resolve(self.transform, self.bone, bones))
        top = self._resolve(self.transform, self.bone, bones)
        bottom = self._resolve(self.transform_bottom, self.bone_bottom, bones)
        return self.definition.posed(top, bottom)


def _parse_affine(value):
    if value is None:
        return None, None
    if isinstance(value, dict) and "bone" in value:
        return None, int(value["bone"])
    arr = np.asarray(value, dtype=np.float64).reshape(3, 4)
    return arr, None


def _parse_region(rdef: dict, base_dir: str) -> RegionSpec:
    name = rdef.get("name", "region")
    verts, faces = load_shell(os.path.join(base_dir, rdef["shell"]))
    kind = rdef.get("kind", "rigid")
    if kind == "rigid":
        definition = RigidRegion.create(name, verts, faces)
        transform, bone = _parse_affine(rdef.get("transform"))
        return RegionSpec(definition=definition, kind="rigid", transform=transform, bone=bone)
    if kind == "plane_split":
        definition = PlaneSplitRegion.create(
            name,
            verts,
            faces,
            plane_top=np.array(
                [rdef["plane_top"]["point"], rdef["plane_top"]["normal"]], dtype=np.float64
            ),
            plane_bottom=np.array(
                [rdef["plane_bottom"]["point"], rdef["plane_bottom"]["normal"]],
                dtype=np.float64,
            ),
            gap_color=rdef.get("gap_color", (0.0, 0.0, 0.0)),
        )
        t_top, b_top = _parse_affine(rdef.get("transform_top"))
        t_bot, b_bot = _parse_affine(rdef.get("transform_bottom"))
        return RegionSpec(
            definition=definition,
            kind="plane_split",
            transform=t_top,
            bone=b_top,
            transform_bottom=t_bot,
            bone_bottom=b_bot,
        )
    raise ConfigError(f"unknown region kind {kind!r}")


@dataclass
class SceneConfig:
    """Loaded scene: cage, field, regions, frames, and render settings."""

    cage: TetCage
    radiance: object
    regions: list  # RegionSpec
    background: np.ndarray
    render: RenderConfig
    rotation_fraction: float
    rotation_seed: int
    frame_vertices: list | None = None  # per-frame (nv, 3) arrays
    rig: anim.DeformRig | None = None
    pose_rows: list | None = None  # (frame, PoseParams)

    @property
    def num_frames(self) -> int:
        if self.frame_vertices is not None:
            return len(self.frame_vertices)
        if self.pose_rows is not None:
            return len(self.pose_rows)
        return 1

    def state_for_frame(self, index: int) -> DeformedState:
        """DeformedState (cage vertices + posed regions) for one frame."""
        bones = None
        if self.pose_rows is not None:
            _, params = self.pose_rows[index]
            vertices = anim.pose(self.rig, params)
            bones = params.bones
        elif self.frame_vertices is not None:
            vertices = self.frame_vertices[index]
        else:
            vertices = self.cage.rest_vertices
        region_states = tuple(spec.posed(bones) for spec in self.regions)
        return DeformedState.for_cage(self.cage, vertices, region_states)


def load_scene_config(path) -> SceneConfig:
    base_dir = os.path.dirname(os.path.abspath(path))
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}: invalid JSON ({e.msg})") from e

    def resolve(p):
        return os.path.join(base_dir, p)

    try:
        cage = geometry.load_cage(resolve(doc["cage"]))
    except KeyError:
        raise ConfigError(f"{path}: missing 'cage' entry") from None

    fdoc = doc.get("field")
    if fdoc is None:
        raise ConfigError(f"{path}: missing 'field' entry")
    if isinstance(fdoc, str):
        radiance = VoxelField.load(resolve(fdoc))
    elif isinstance(fdoc, dict) and "analytic" in fdoc:
        radiance = build_analytic_field(fdoc["analytic"])
    else:
        raise ConfigError(f"{path}: 'field' must be a voxfield path or analytic spec")

    regions = [_parse_region(r, base_dir) for r in doc.get("regions", [])]

    rdoc = doc.get("render", {})
    render_cfg = RenderConfig(
        n_coarse=int(rdoc.get("n_coarse", 128)),
        n_fine=int(rdoc.get("n_fine", 64)),
        jitter=bool(rdoc.get("jitter", True)),
        seed=int(rdoc.get("seed", 0)),
        eps_transmittance=float(rdoc.get("eps_transmittance", 1e-4)),
        mode=rdoc.get("mode", "two-stage-extended"),
        restrict_to_cage=bool(rdoc.get("restrict_to_cage", True)),
        map_mode=rdoc.get("map_mode", "segment-lerp"),
    )
    rot = doc.get("rotation", {})

    frame_vertices = None
    rig = None
    pose_rows = None
    if "frames" in doc and "rig" in doc:
        raise ConfigError(f"{path}: specify either 'frames' or 'rig', not both")
    if "frames" in doc:
        frame_vertices = []
        for fp in doc["frames"]:
            verts = geometry.load_frame(resolve(fp))
            if len(verts) != cage.num_vertices:
                raise ConfigError(
                    f"{fp}: frame has {len(verts)} vertices, cage has {cage.num_vertices}"
                )
            frame_vertices.append(verts)
    elif "rig" in doc:
        rdef = doc["rig"]
        probe = open(resolve(rdef["file"]), "r", encoding="utf-8").readline().split()
        if len(probe) != 5:
            raise ConfigError(f"{rdef['file']}: bad defrig header")
        rig = anim.load_rig(resolve(rdef["file"]), cage.rest_vertices)
        pose_rows = anim.load_pose_stream(
            resolve(rdef["params"]), rig.num_shapes, rig.num_bones
        )

    return SceneConfig(
        cage=cage,
        radiance=radiance,
        regions=regions,
        background=np.asarray(doc.get("background", (0.0, 0.0, 0.0)), dtype=np.float64),
        render=render_cfg,
        rotation_fraction=float(rot.get("fraction", 0.05)),
        rotation_seed=int(rot.get("seed", 0)),
        frame_vertices=frame_vertices,
        rig=rig,
        pose_rows=pose_rows,
    )
