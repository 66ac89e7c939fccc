"""
Polygon IoU, matching and precision / recall / H-mean
=====================================================
"""

import numpy as np

from nask.evaluation import evaluate, format_table, match_detections, polygon_iou

square = np.array([[0, 0], [4, 0], [4, 4], [0, 4]], float)
shifted = square + [2, 0]
print("IoU", polygon_iou(square, shifted))  # 8 / 24

# %% concave shapes
ell = np.array([[0, 0], [4, 0], [4, 1], [1, 1], [1, 4], [0, 4]], float)
print("L vs square", polygon_iou(ell, square))

# %% one image: two ground truths, three detections
gts = [square, square + [10, 0]]
dets = [square + [0.2, 0], shifted + [10, 0], square + [30, 30]]
print(match_detections(gts, dets, iou_threshold=0.5))

rep = evaluate([(gts, dets)])
print(format_table({"demo": rep}))
