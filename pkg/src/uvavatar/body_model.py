"""Parametric body mesh: shape/pose blendshapes, clothing offsets and linear blend skinning."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_OFFSET_CAP = 0.15


@dataclass(frozen=True, eq=False)
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray


@dataclass(frozen=True, eq=False)
class BodyTemplate:
    """Rest-pose body model.

    Args:
        vertices: (N, 3) rest-pose positions in meters.
        faces: (M, 3) vertex indices.
        skin_weights: (N, K) non-negative rows summing to one.
        joint_regressor: (K, N) non-negative rows summing to one.
        parents: (K,) parent joint per joint, -1 for the root.
        shape_basis: (S, N, 3) displacement per unit shape coefficient.
        pose_basis: optional (9*(K-1), N, 3) keyed to flattened ``R_k - I`` for k >= 1.
        symmetry: (N,) left/right vertex permutation (an involution).
        joint_names: optional names, used to locate hands, feet and limb chains.
    """

    vertices: np.ndarray
    faces: np.ndarray
    skin_weights: np.ndarray
    joint_regressor: np.ndarray
    parents: np.ndarray
    shape_basis: np.ndarray
    pose_basis: np.ndarray | None = None
    symmetry: np.ndarray | None = None
    joint_names: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self):
        n = len(self.vertices)
        k = len(self.parents)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise ValueError(f"vertices must be (N, 3), got {self.vertices.shape}")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= n):
            raise ValueError("faces reference vertices outside [0, N)")
        if self.skin_weights.shape != (n, k):
            raise ValueError(f"skin_weights must be ({n}, {k}), got {self.skin_weights.shape}")
        if (self.skin_weights < 0).any() or not np.allclose(self.skin_weights.sum(1), 1.0, rtol=0, atol=1e-9):
            raise ValueError("skin_weights rows must be non-negative and sum to 1")
        if self.joint_regressor.shape != (k, n):
            raise ValueError(f"joint_regressor must be ({k}, {n}), got {self.joint_regressor.shape}")
        if (self.joint_regressor < 0).any() or not np.allclose(self.joint_regressor.sum(1), 1.0, rtol=0, atol=1e-9):
            raise ValueError("joint_regressor rows must be non-negative and sum to 1")
        if self.parents[0] != -1 or any(not (0 <= self.parents[j] < j) for j in range(1, k)):
            raise ValueError("parents must be topologically ordered with parents[0] == -1")
        if self.shape_basis.ndim != 3 or self.shape_basis.shape[1:] != (n, 3):
            raise ValueError(f"shape_basis must be (S, {n}, 3), got {self.shape_basis.shape}")
        if self.pose_basis is not None and self.pose_basis.shape != (9 * (k - 1), n, 3):
            raise ValueError(f"pose_basis must be ({9 * (k - 1)}, {n}, 3), got {self.pose_basis.shape}")
        if self.symmetry is not None:
            sym = self.symmetry
            if sym.shape != (n,) or sym.min() < 0 or sym.max() >= n or not np.array_equal(sym[sym], np.arange(n)):
                raise ValueError("symmetry must be an involution on vertex indices")
        if self.joint_names and len(self.joint_names) != k:
            raise ValueError("joint_names length must equal the joint count")

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_joints(self) -> int:
        return len(self.parents)

    @property
    def num_shapes(self) -> int:
        return len(self.shape_basis)

    @property
    def symmetry_pairs(self) -> np.ndarray:
        """(P, 2) index pairs with left < right; self-symmetric vertices are omitted."""
        if self.symmetry is None:
            return np.zeros((0, 2), dtype=np.int64)
        idx = np.arange(self.num_vertices)
        keep = idx < self.symmetry
        return np.stack([idx[keep], self.symmetry[keep]], axis=1)

    def joint_index(self, name: str) -> int:
        try:
            return self.joint_names.index(name)
        except ValueError:
            raise KeyError(f"no joint named {name!r}") from None

    @classmethod
    def rigid(cls, vertices, faces) -> "BodyTemplate":
        """Single-joint template for meshes that are never posed (test quads, scans)."""
        vertices = np.asarray(vertices, dtype=np.float64)
        n = len(vertices)
        return cls(
            vertices=vertices,
            faces=np.asarray(faces, dtype=np.int64).reshape(-1, 3),
            skin_weights=np.ones((n, 1)),
            joint_regressor=np.full((1, n), 1.0 / n),
            parents=np.array([-1]),
            shape_basis=np.zeros((0, n, 3)),
        )


def _check_params(template: BodyTemplate, pose, shape, offsets):
    k, n, s = template.num_joints, template.num_vertices, template.num_shapes
    pose = np.zeros(3 * k) if pose is None else np.asarray(pose, dtype=np.float64).ravel()
    shape = np.zeros(s) if shape is None else np.asarray(shape, dtype=np.float64).ravel()
    if pose.shape != (3 * k,):
        raise ValueError(f"pose: expected {3 * k} axis-angle values, got {pose.size}")
    if shape.shape != (s,):
        raise ValueError(f"shape: expected {s} coefficients, got {shape.size}")
    if offsets is not None:
        offsets = np.asarray(offsets, dtype=np.float64)
        if offsets.shape != (n, 3):
            raise ValueError(f"offsets: expected ({n}, 3), got {offsets.shape}")
    return pose, shape, offsets


def skew(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def rodrigues(axis_angle) -> np.ndarray:
    """Rotation matrix for one axis-angle vector or a (..., 3) batch of them."""
    r = np.asarray(axis_angle, dtype=np.float64)
    theta = np.linalg.norm(r, axis=-1)[..., None, None]
    k = skew(r)
    small = theta < 1e-8
    safe = np.where(small, 1.0, theta)
    # Taylor terms keep the small-angle branch accurate to double precision.
    a = np.where(small, 1.0 - theta**2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(safe)) / safe**2)
    return np.eye(3) + a * k + b * (k @ k)


def left_jacobian(axis_angle) -> np.ndarray:
    """SO(3) left Jacobian: dR R^T = skew(J_l(r) dr)."""
    r = np.asarray(axis_angle, dtype=np.float64)
    theta = np.linalg.norm(r, axis=-1)[..., None, None]
    k = skew(r)
    small = theta < 1e-6
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(safe)) / safe**2)
    b = np.where(small, 1.0 / 6.0 - theta**2 / 120.0, (safe - np.sin(safe)) / safe**3)
    return np.eye(3) + a * k + b * (k @ k)


def normalize_axis_angle(axis_angle) -> np.ndarray:
    """Equivalent axis-angle with angle in [0, pi]."""
    r = np.asarray(axis_angle, dtype=np.float64).reshape(-1, 3)
    theta = np.linalg.norm(r, axis=1)
    out = r.copy()
    nz = theta > 0
    wrapped = np.mod(theta[nz] + np.pi, 2 * np.pi) - np.pi
    axis = r[nz] / theta[nz, None]
    out[nz] = axis * wrapped[:, None]
    return out.reshape(np.shape(axis_angle))


def shaped_vertices(template: BodyTemplate, shape) -> np.ndarray:
    shape = np.asarray(shape, dtype=np.float64)
    return template.vertices + np.tensordot(shape, template.shape_basis, axes=1)


def pose_feature(pose: np.ndarray, num_joints: int) -> np.ndarray:
    rots = rodrigues(pose.reshape(num_joints, 3)[1:])
    return (rots - np.eye(3)).reshape(-1)


def morph(template: BodyTemplate, pose=None, shape=None, offsets=None) -> np.ndarray:
    """Unposed vertices: rest template plus shape, pose and clothing offsets."""
    pose, shape, offsets = _check_params(template, pose, shape, offsets)
    verts = shaped_vertices(template, shape)
    if template.pose_basis is not None:
        verts = verts + np.tensordot(pose_feature(pose, template.num_joints), template.pose_basis, axes=1)
    if offsets is not None:
        verts = verts + offsets
    return verts


def joints(template: BodyTemplate, shape=None) -> np.ndarray:
    _, shape, _ = _check_params(template, None, shape, None)
    return template.joint_regressor @ shaped_vertices(template, shape)


def forward_kinematics(template: BodyTemplate, pose, rest_joints: np.ndarray):
    """World rotations (K, 3, 3) and world joint positions (K, 3).

    Positions are accumulated as displacements from the rest joints so that a zero pose
    reproduces the rest joints bit for bit.
    """
    k = template.num_joints
    local = rodrigues(np.asarray(pose, dtype=np.float64).reshape(k, 3))
    rot = np.empty((k, 3, 3))
    delta = np.zeros((k, 3))
    rot[0] = local[0]
    eye = np.eye(3)
    for j in range(1, k):
        p = template.parents[j]
        rot[j] = rot[p] @ local[j]
        delta[j] = delta[p] + (rot[p] - eye) @ (rest_joints[j] - rest_joints[p])
    return rot, rest_joints + delta


def _blend(template: BodyTemplate, rot, pos, rest_joints, verts):
    # v + sum_k w_k [(R_k - I)(v - J_k) + (pos_k - J_k)]; exact identity at zero pose
    w = template.skin_weights
    rel = rot - np.eye(3)
    shift = pos - rest_joints
    blended_rel = np.einsum("nk,kij->nij", w, rel)
    offset = w @ (shift - np.einsum("kij,kj->ki", rel, rest_joints))
    return verts + (np.einsum("nij,nj->ni", blended_rel, verts) + offset)


def skin(template: BodyTemplate, pose=None, shape=None, offsets=None) -> Mesh:
    """Posed mesh by linear blend skinning of the morphed vertices."""
    pose, shape, offsets = _check_params(template, pose, shape, offsets)
    verts = morph(template, pose, shape, offsets)
    rest_joints = template.joint_regressor @ shaped_vertices(template, shape)
    rot, pos = forward_kinematics(template, pose, rest_joints)
    posed = _blend(template, rot, pos, rest_joints, verts)
    if not np.isfinite(posed).all():
        raise FloatingPointError("skinning produced non-finite vertices; check pose/shape/offset inputs")
    return Mesh(posed, template.faces)


def posed_joints(template: BodyTemplate, pose=None, shape=None) -> np.ndarray:
    pose, shape, _ = _check_params(template, pose, shape, None)
    _, pos = forward_kinematics(template, pose, joints(template, shape))
    return pos


def blended_linear(template: BodyTemplate, pose) -> np.ndarray:
    """(N, 3, 3) skin-weighted rotation per vertex; maps template-space offsets to posed space."""
    k = template.num_joints
    rot, _ = forward_kinematics(template, pose, np.zeros((k, 3)))
    return np.einsum("nk,kij->nij", template.skin_weights, rot)


def unpose_offsets(template: BodyTemplate, pose, posed_offsets: np.ndarray) -> np.ndarray:
    """Inverse of :func:`blended_linear` applied per vertex."""
    lin = blended_linear(template, pose)
    return np.linalg.solve(lin, posed_offsets[..., None])[..., 0]


def _descendants(parents: np.ndarray) -> np.ndarray:
    k = len(parents)
    desc = np.eye(k, dtype=bool)
    for j in range(k - 1, 0, -1):
        desc[parents[j]] |= desc[j]
    return desc


def skin_with_jacobian(template: BodyTemplate, pose, shape, offsets=None, vertex_ids=None):
    """Posed vertices and joints with their derivatives w.r.t. pose and shape.

    Returns:
        verts: (V, 3) posed vertices (V = len(vertex_ids) or N).
        joints: (K, 3) posed joints.
        dverts: (V, 3, 3K + S).
        djoints: (K, 3, 3K + S).
    """
    pose, shape, offsets = _check_params(template, pose, shape, offsets)
    k, s = template.num_joints, template.num_shapes
    ids = np.arange(template.num_vertices) if vertex_ids is None else np.asarray(vertex_ids)
    weights = template.skin_weights[ids]

    unposed = morph(template, pose, shape, offsets)[ids]
    rest_joints = template.joint_regressor @ shaped_vertices(template, shape)
    local = rodrigues(pose.reshape(k, 3))
    rot, pos = forward_kinematics(template, pose, rest_joints)

    # each vertex rigidly transformed by every joint, then blended
    per_joint = np.einsum("kij,vkj->vki", rot, unposed[:, None, :] - rest_joints[None]) + pos[None]
    verts = np.einsum("vk,vki->vi", weights, per_joint)

    desc = _descendants(template.parents)
    dverts = np.zeros((len(ids), 3, 3 * k + s))
    djoints = np.zeros((k, 3, 3 * k + s))
    jl = left_jacobian(pose.reshape(k, 3))
    for j in range(k):
        parent_rot = rot[template.parents[j]] if j > 0 else np.eye(3)
        omega = parent_rot @ jl[j]  # columns: world angular velocity per pose coordinate
        sub = desc[j]
        wsub = weights[:, sub]
        rows = np.nonzero(wsub.any(1))[0]
        if len(rows):
            wr = wsub[rows]
            moved = np.einsum("vk,vki->vi", wr, per_joint[rows][:, sub]) - wr.sum(1, keepdims=True) * pos[j]
            # d/dtheta_{j,i} = omega_i x moved = -skew(moved) @ omega
            dverts[rows, :, 3 * j:3 * j + 3] = -skew(moved) @ omega
        jmoved = pos[sub] - pos[j]
        djoints[sub, :, 3 * j:3 * j + 3] = -skew(jmoved) @ omega

    if template.pose_basis is not None:
        # pose blendshapes add a term through the unposed vertices
        blended_rot = np.einsum("vk,kij->vij", weights, rot)
        basis = template.pose_basis[:, ids, :].reshape(k - 1, 3, 3, len(ids), 3)
        for j in range(1, k):
            # dR_j/dtheta_i = skew(J_l e_i) R_j
            dr = np.einsum("iab,bc->iac", skew(jl[j].T), local[j])
            dmorph = np.einsum("iab,abvc->ivc", dr, basis[j - 1])
            dverts[:, :, 3 * j:3 * j + 3] += np.einsum("vab,ivb->vai", blended_rot, dmorph)

    # shape: through unposed vertices and rest joint positions
    dunposed = template.shape_basis[:, ids, :]  # (S, V, 3)
    drest_joints = np.einsum("kn,snc->skc", template.joint_regressor, template.shape_basis)  # (S, K, 3)
    dpos = np.empty((s, k, 3))
    if s:
        dpos[:, 0] = drest_joints[:, 0]
        for j in range(1, k):
            p = template.parents[j]
            dpos[:, j] = dpos[:, p] + np.einsum("ab,sb->sa", rot[p], drest_joints[:, j] - drest_joints[:, p])
        dper_joint = np.einsum("kab,svkb->svka", rot, dunposed[:, :, None, :] - drest_joints[:, None, :, :]) + dpos[:, None]
        dverts[:, :, 3 * k:] = np.einsum("vk,svka->vas", weights, dper_joint)
        djoints[:, :, 3 * k:] = dpos.transpose(1, 2, 0)
    return verts, pos, dverts, djoints
