"""
Posing, projecting and recovering a rigid face
==============================================

The cascade starts from the projection of a rigid 3D face model under an
estimated head pose. This walk-through poses the bundled 68-point model,
projects it, and fits the pose back from the 2D points alone.
"""

import numpy as np

from gatcascade.geometry import CameraIntrinsics, HeadPose, canonical_face_model, fit_pose, pose_mae, project

# the bundled model: 68 points in model units, outer eye corners one unit apart
model = canonical_face_model()
print("points:", model.points.shape, "outer eyes:", model.outer_eyes)

# a virtual camera for a 256 px image (focal 1.5 x side, centred principal point)
cam = CameraIntrinsics.default(256)

# angles are radians; translation is in model units, tz is the depth
pose = HeadPose(yaw=np.radians(25), pitch=np.radians(-10), roll=np.radians(8), tx=0.05, ty=-0.03, tz=4.0)
x = project(model, pose, cam)
print("projected shape spans x %.1f..%.1f px, y %.1f..%.1f px" % (x[:, 0].min(), x[:, 0].max(), x[:, 1].min(), x[:, 1].max()))

# exact projections give the pose back to numerical precision
fit = fit_pose(model, x, cam)
print("status:", fit.status, "after", fit.iterations, "iterations")
print("parameter error: %.2e" % np.abs(fit.pose.as_array() - pose.as_array()).max())
print("reprojection RMSE: %.2e px" % fit.rmse)

# half-pixel noise: the fit is no longer exact, but the residual stays near the noise
rng = np.random.default_rng(0)
noisy = fit_pose(model, x + rng.normal(0, 0.5, size=x.shape), cam)
print("noisy RMSE %.3f px, angle errors (deg):" % noisy.rmse, pose_mae([noisy.pose], [pose]))
