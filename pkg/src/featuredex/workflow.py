"""Dataset-level stages shared by the CLI subcommands.

Directory layout produced under a dataset root::

    manifest.jsonl            one ModelRecord per line
    models/NNNNN.stl          binary STL per model
    features/NNNNN.fmat       points + 32-D descriptors per model
    features/config.json      descriptor configuration and its digest
"""

from dataclasses import asdict
import hashlib
import json
import logging
from pathlib import Path

import numpy as np

from . import datagen, descriptor, net, retrieval
from .descriptor import DescriptorConfig, FeatureMatrix
from .errors import IoFailure, ProvenanceMismatchError
from .mesh_io import read_stl
from .pooling import SppConfig, spp_pool
from .rng import derive_seed
from .sampling import PointCloud, sample_surface, voxel_downsample
from ._fileio import atomic_write_text

log = logging.getLogger("featuredex")


def cloud_from_mesh(mesh, dcfg: DescriptorConfig, model_seed: int) -> PointCloud:
    cloud = sample_surface(mesh, dcfg.n_points, model_seed)
    if dcfg.voxel_size > 0:
        cloud = voxel_downsample(cloud, dcfg.voxel_size)
    # positions are stored as float32 in FMAT; round now so in-memory and
    # on-disk paths see the same coordinates
    return PointCloud(cloud.points.astype(np.float32))


def features_for_mesh(mesh, dcfg: DescriptorConfig, model_seed: int) -> FeatureMatrix:
    return descriptor.compute_descriptors(cloud_from_mesh(mesh, dcfg, model_seed), dcfg.radius)


def sampling_seed(dcfg: DescriptorConfig, model_id: int) -> int:
    return derive_seed(dcfg.seed, model_id)


def fmat_path(root, model_id: int) -> Path:
    return Path(root) / "features" / f"{model_id:05d}.fmat"


def extract_dataset(root, dcfg: DescriptorConfig) -> list:
    root = Path(root)
    records = datagen.read_manifest(root)
    for rec in records:
        mesh = read_stl(root / rec.path)
        fm = features_for_mesh(mesh, dcfg, sampling_seed(dcfg, rec.id))
        descriptor.write_fmat(fm, fmat_path(root, rec.id))
        log.debug("extracted model %d: %d points", rec.id, fm.n)
    atomic_write_text(root / "features" / "config.json",
                      json.dumps({"descriptor": asdict(dcfg), "digest": dcfg.digest()}, indent=2))
    return records


def load_descriptor_config(root) -> DescriptorConfig:
    path = Path(root) / "features" / "config.json"
    try:
        d = json.loads(path.read_text())
    except OSError as e:
        raise IoFailure(f"{path}: {e}") from e
    return DescriptorConfig(**d["descriptor"])


def load_features(root, records=None) -> dict:
    root = Path(root)
    records = records if records is not None else datagen.read_manifest(root)
    out = {}
    for rec in records:
        _, fm = descriptor.read_fmat(fmat_path(root, rec.id))
        out[rec.id] = fm
    return out


# -- training ----------------------------------------------------------------------

def class_map(records) -> list:
    """Catalog family ids present in the dataset, ascending; position = class index."""
    return sorted({r.family_id for r in records})


def train_dataset(root, tcfg: net.TrainConfig, scfg: SppConfig, records=None, features=None):
    root = Path(root)
    records = records if records is not None else datagen.read_manifest(root)
    features = features if features is not None else load_features(root, records)
    classes = class_map(records)
    label = {fid: n for n, fid in enumerate(classes)}
    split = {"train": [], "val": []}
    for r in records:
        if r.split in split:
            fm = features[r.id]
            split[r.split].append((fm.points, fm.features, label[r.family_id]))
    params, hist = net.train(split["train"], tcfg, scfg, val_set=split["val"],
                             n_families=len(classes), log=log.info)
    return params, hist, classes


# -- indexing --------------------------------------------------------------------

def params_digest(params: net.NetParams) -> str:
    return hashlib.sha256(net.encode_fnet(params)).hexdigest()


def index_digest(dcfg: DescriptorConfig, scfg: SppConfig, mode: str, params=None) -> bytes:
    parts = {"descriptor": dcfg.digest(), "spp": asdict(scfg), "mode": mode}
    if mode == "learned":
        parts["model"] = params_digest(params)
    return retrieval.provenance_digest(**parts)


def embed(fm: FeatureMatrix, mode: str, scfg: SppConfig, params=None) -> np.ndarray:
    if mode == "raw":
        return spp_pool(fm.points, fm.features, scfg)
    emb, _ = net.forward(params, fm.points, fm.features)
    return emb


def index_dataset(root, dcfg, scfg, mode: str, params=None, records=None, features=None):
    root = Path(root)
    records = records if records is not None else datagen.read_manifest(root)
    features = features if features is not None else load_features(root, records)
    if mode == "learned":
        scfg = params.spp
    entries = [(r.id, r.family_id, embed(features[r.id], mode, scfg, params)) for r in records]
    return retrieval.build_index(entries, mode, index_digest(dcfg, scfg, mode, params))


def check_provenance(index, dcfg, scfg, params=None):
    expected = index_digest(dcfg, scfg if params is None else params.spp, index.mode, params)
    if expected != index.digest:
        raise ProvenanceMismatchError(
            "index was built with a different descriptor/SPP/model configuration")


# -- evaluation --------------------------------------------------------------------

def evaluate_dataset(root, index, k: int = 5, records=None, features=None) -> dict:
    root = Path(root)
    records = records if records is not None else datagen.read_manifest(root)
    features = features if features is not None else load_features(root, records)
    test_ids = [r.id for r in records if r.split == "test"]
    norms = [(r.id, r.family_id, retrieval.frobenius_norm(features[r.id])) for r in records]
    return {
        "baseline": retrieval.evaluate_frobenius(norms, test_ids, k),
        "spp": retrieval.evaluate(index, test_ids, k),
        "spp_mode": index.mode,
    }


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
