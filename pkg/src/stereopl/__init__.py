"""Stereo point-line SLAM back-end.

Modules:
  geometry      SE(3) algebra and the rectified stereo pinhole model
  feature_grid  grid-based spatial suppression of scored keypoints
  line_merge    Hough-space clustering and merging of 2D segments
  factors       point and line reprojection residuals with analytic Jacobians
  optimizer     robust Levenberg-Marquardt over pose/landmark factor graphs
  keyframe      PID + velocity-gated keyframe insertion policy
  simworld      seeded synthetic world generation and stereo frame rendering
  evaluation    trajectory association, alignment, ATE/RPE metrics
  cli           command-line front end
"""

__version__ = "0.1.0"
