"""Split-computing multi-LiDAR 3D detection: edge heads, feature transport, server-side fusion."""

from .geometry import Pose6DoF, RigidTransform, compose, from_pose, invert, to_pose
from .pointcloud import Box, GroundTruth, PointCloud, SceneSpec, gen_scene
from .sparse import ConvKernel, GridSpec, SparseFeatureTensor, sparse_conv, voxelize
from .model import Detection, NetworkSpec, Weights, init_weights, run_full, run_head, run_tail
from .fusion import FusionConfig, fuse_concat_conv, fuse_max, transform_tensor
from .ndt import NdtMap, build_ndt_map, calibrate, ndt_align, ndt_score
from .protocol import FeatureMessage, ProtocolError, decode_frame, encode_feature
from .runtime import CostModel, FrameBarrier, LinkModel, TimingReport, simulate_pipeline
from .evaluation import EvalResult, average_precision, eval_report, iou3d

__version__ = "0.1.0"
