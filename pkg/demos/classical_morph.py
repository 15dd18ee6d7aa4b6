# Classical landmark morph of two procedural faces.
# Writes the parents, the triangulation overlay and the morph to ./out_classical/
import os
import sys

import numpy as np
from PIL import Image, ImageDraw

from morphkit.geometry import (LandmarkSet, average_landmarks, classical_morph, delaunay_triangulate, save_image,
                               warp_to)
from morphkit.pipeline.synth import landmarks_for, render_face, sample_params

OUT = sys.argv[1] if len(sys.argv) > 1 else "out_classical"
R = 128
os.makedirs(OUT, exist_ok=True)

rng = np.random.default_rng(5)
faces = []
for _ in range(2):
    p = sample_params(rng)
    faces.append((render_face(p, R, rng), LandmarkSet(landmarks_for(p))))
(i1, l1), (i2, l2) = faces

# ---------- target shape: plain average of the two landmark sets ----------
lm = average_landmarks(l1, l2)
mesh = delaunay_triangulate(lm)
print(f"{len(mesh.vertices)} vertices ({len(lm.points)} landmarks + boundary), {len(mesh.triangles)} triangles")

# ---------- mesh overlay ----------
canvas = Image.fromarray((i1 * 255).round().astype(np.uint8))
draw = ImageDraw.Draw(canvas)
px = mesh.vertices * R
for a, b, c in mesh.triangles:
    draw.polygon([tuple(px[a]), tuple(px[b]), tuple(px[c])], outline=(0, 255, 0))
canvas.save(os.path.join(OUT, "mesh.png"))

# ---------- warp both parents, then blend ----------
save_image(os.path.join(OUT, "parent_a.png"), i1)
save_image(os.path.join(OUT, "parent_b.png"), i2)
save_image(os.path.join(OUT, "warped_a.png"), warp_to(i1, l1, lm))
save_image(os.path.join(OUT, "warped_b.png"), warp_to(i2, l2, lm))
morph = classical_morph(i1, i2, l1, l2, lm, alpha=0.5)
save_image(os.path.join(OUT, "morph.png"), morph)
print("wrote", OUT)
