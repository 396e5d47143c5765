"""cagevox: real-time deformation and rendering of volumetric radiance
fields through tetrahedral cages.

Camera rays are cast in the deformed scene, decomposed into per-tetrahedron
intervals by BVH-accelerated traversal, mapped back to the canonical field
with barycentric coordinates (view directions rotated per tetrahedron), and
integrated with the emission-absorption model.  Cages animate by
blendshapes and linear blend skinning; voxel fields fit to posed images by
Adam on trilinear/spherical-harmonic grids.
"""

from .errors import (
    CagevoxError,
    ConfigError,
    DegenerateTet,
    DimensionMismatch,
    EmptySurface,
    FormatError,
    InconsistentOrientation,
    InconsistentTraversal,
    NonFiniteLoss,
    NonManifold,
    NotATetSegment,
    UnknownRegion,
)
from .geometry import (
    OUTSIDE,
    DeformedState,
    TetCage,
    barycentric_coords,
    derive_faces,
    load_cage,
    load_frame,
    locate_point_bruteforce,
    locate_points_bruteforce,
    reconstruct,
    save_cage,
    save_frame,
    signed_volume,
)
from .lookup import (
    Bvh,
    Hit,
    RaySegments,
    build_bvh,
    locate_point,
    locate_points,
    ray_hits,
    segment_ray,
    segment_rays,
)
from .deform import (
    KIND_GAP,
    KIND_OUTSIDE,
    KIND_RIGID,
    KIND_TET,
    PlaneSplitRegion,
    RigidRegion,
    RotationField,
    RotationFieldBuilder,
    build_rotation_field,
    estimate_rotation,
    map_point,
    map_points,
    map_sample_on_segment,
    rotate_view,
)
from .field import (
    CompositeField,
    ConstantBox,
    ConstantSphere,
    GaussianBlob,
    TransformedField,
    ViewLobe,
    VoxelField,
    sh_basis,
)
from .render import (
    Camera,
    Frame,
    RenderConfig,
    SampleSet,
    Scene,
    fine_sample,
    generate_ray,
    integrate,
    render_direct,
    render_image,
    render_ray,
    render_rays,
)
from .fit import LossConfig, TrainSet, fit, rgb_loss, sparsity_loss
from .anim import (
    DeformRig,
    PoseParams,
    load_pose_stream,
    load_rig,
    pose,
    save_pose_stream,
    save_rig,
    transfer_weights,
)
from .imageio import psnr, read_ppm, write_ppm
from .scene import SceneConfig, load_scene_config, load_shell, save_shell

__version__ = "0.1.0"
