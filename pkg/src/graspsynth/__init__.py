"""Scale-aware functional grasp synthesis for articulated robot hands.

Pipeline: load an affordance-annotated object, rescale it across a category
scale range, align a hand to the object's grasp axes, refine the pose with a
gradient-based multi-term loss, score and filter the results, and optionally
train a point-cloud conditioned generative model on the surviving grasps.
"""

__version__ = "0.1.0"
