"""
Ground-truth masks from a scene and a question program
======================================================

A six-object scene and the question "Are there any other things that have
the same size as the shiny sphere?" are evaluated step by step. Each of the
four ground-truth object sets is printed, then rasterised into a pixel mask.
"""
from xaibench.masks import rasterize_scene, union_mask
from xaibench.program import derive_gts, evaluate, program_from_functions
from xaibench.scene import SceneGraph, make_object

objects = [
    ("small", "brown", "metal", "sphere", (20, 30)),
    ("small", "gray", "rubber", "cube", (10, 44)),
    ("small", "purple", "rubber", "cylinder", (40, 20)),
    ("small", "cyan", "rubber", "cube", (50, 50)),
    ("large", "purple", "metal", "cylinder", (30, 14)),
    ("large", "yellow", "rubber", "cube", (52, 30)),
]
scene = SceneGraph(tuple(make_object(k, *o) for k, o in enumerate(objects)), (64, 64))

program = program_from_functions([
    ("scene",), ("filter_material", "metal"), ("filter_shape", "sphere"),
    ("unique",), ("same_size",), ("exist",),
])

# the trace keeps every intermediate value, which is what the masks are built from
trace = evaluate(program, scene)
for node, value in zip(program.nodes, trace.values):
    print(f"{node.function:16s} {node.value_inputs or ''!s:12s} -> {value}")
print("answer:", trace.answer)

gts = derive_gts(trace, scene)
store, _ = rasterize_scene(scene)
for kind in ("unique", "unique_first_nonempty", "union", "all_objects"):
    ids = gts[kind]
    mask = union_mask(ids, store)
    print(f"{kind:22s} objects {sorted(ids)}  pixels {mask.pixel_count}")

# a coarse look at the union mask: '#' inside, '.' outside
mask = union_mask(gts["union"], store).bits
for row in mask[::4]:
    print("".join("#" if v else "." for v in row[::2]))
