import json, math, numpy as np
import os
out = os.path.dirname(os.path.abspath(__file__)) + "/"
fx = fy = 500.0; cx, cy = 320.0, 240.0
cam = {"fx": fx, "fy": fy, "cx": cx, "cy": cy}
def proj(p): return [fx * p[0] / p[2] + cx, fy * p[1] / p[2] + cy]
def qmat(x, y, z, w):
    return np.array([[1-2*(y*y+z*z), 2*(x*y-z*w), 2*(x*z+y*w)],
                     [2*(x*y+z*w), 1-2*(x*x+z*z), 2*(y*z-x*w)],
                     [2*(x*z-y*w), 2*(y*z+x*w), 1-2*(x*x+y*y)]])
def yawm(t):
    c, s = math.cos(t), math.sin(t)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
def dump(name, d):
    with open(out + name, "w") as f: json.dump(d, f, indent=2); f.write("\n")
rng = np.random.default_rng(7)
shape = rng.uniform(-0.25, 0.25, size=(8, 3))
q = np.array([0.1, -0.3, 0.2, 0.9]); q /= np.linalg.norm(q)
t = np.array([0.1, -0.05, 4.0])
R = qmat(*q)
pts = [{"x3d": list(map(float, x)), "x2d": proj(R @ x + t), "w2d": [1.0, 1.0]} for x in shape]
gt6 = {"t": list(map(float, t)), "quat_xyzw": list(map(float, q))}
dump("noise_free_6dof.json", {"format_version": 1, "camera": cam, "pose_space": {"kind": "quat6dof"}, "points": pts, "gt": gt6})
dump("no_gt.json", {"format_version": 1, "camera": cam, "pose_space": {"kind": "quat6dof"}, "points": pts})
bad = {"format_version": 1, "camera": cam, "pose_space": {"kind": "quat6dof"}, "points": [dict(p) for p in pts]}
bad["points"][2] = {"x3d": pts[2]["x3d"], "x2d": pts[2]["x2d"], "weight": [1.0, 1.0]}
dump("malformed.json", bad)
flat = {"format_version": 1, "camera": cam, "pose_space": {"kind": "yaw4dof"}, "points": [dict(p, w2d=[0.0, 0.0]) for p in pts]}
dump("flat.json", flat)
# 4DoF, noise free, tight weights
t4 = np.array([-0.2, 0.1, 3.5]); th4 = 0.7
pts4 = [{"x3d": list(map(float, x)), "x2d": proj(yawm(th4) @ x + t4), "w2d": [20.0, 20.0]} for x in shape]
dump("tight_4dof.json", {"format_version": 1, "camera": cam, "pose_space": {"kind": "yaw4dof"}, "points": pts4,
                         "gt": {"t": list(map(float, t4)), "yaw": th4}})
# symmetric square, yaw only
h = 0.3; w = 0.3; tf = np.array([0.0, 0.0, 4.0]); thg = 0.4
corners = [np.array(c) + np.array([0, -0.6 * h, 0]) for c in [(h, 0, h), (-h, 0, h), (-h, 0, -h), (h, 0, -h)]]
obs = [proj(yawm(thg) @ c + tf) for c in corners]
sq = [{"x3d": list(map(float, c)), "x2d": uv, "w2d": [w, w]} for uv in obs for c in corners]
dump("symmetric_square.json", {"format_version": 1, "camera": cam, "pose_space": {"kind": "yaw_only", "t_fixed": list(map(float, tf))},
                               "points": sq, "gt": {"yaw": thg}, "solver": {"delta_rel": 0.1}})
# yaw only with noise for gradient checks
thy = -0.9
sh = rng.uniform(-0.25, 0.25, size=(6, 3))
py = []
for x in sh:
    uv = np.array(proj(yawm(thy) @ x + tf)) + rng.normal(0, 2.0, 2)
    py.append({"x3d": list(map(float, x)), "x2d": list(map(float, uv)), "w2d": list(map(float, rng.uniform(0.2, 0.6, 2)))})
dump("yaw_1dof.json", {"format_version": 1, "camera": cam, "pose_space": {"kind": "yaw_only", "t_fixed": list(map(float, tf))},
                       "points": py, "gt": {"yaw": thy}})
dump("monte_carlo.json", {"format_version": 1, "scene": {}, "train": {"loss_mode": "monte_carlo"}})
dump("reprojection_only.json", {"format_version": 1, "scene": {}, "train": {"loss_mode": "reprojection_only"}})
with open(out + "trace3.csv", "w") as f:
    f.write("# format_version=1\nstep,l_tgt,l_pred,l_kl,val_rot_deg,val_trans\n0,10.5,-2.0,8.5,,\n1,9.0,-2.5,6.5,,\n2,7.25,-3.0,4.25,12.5,0.4\n")
