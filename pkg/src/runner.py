import json
import logging
import math
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np

from .config import ConfigError, RunConfig
from .extract import (
    extract_mesh,
    marching_squares,
    model_value_fn,
    sample_function,
    sample_grid,
    write_field_grid,
    write_grid_preview,
)
from .featgen import FeatGenConfig, sharp_graph_from_cloud, strips_from_mesh, strips_from_points
from .feature import FeatureSet, MollifierConfig, load_feature_set, save_feature_set
from .geom import PointCloud, TriMesh, read_feature_graph, read_obj, read_xyz, write_feature_graph, write_obj
from .metrics import MetricsConfig, evaluate_meshes, sample_surface
from .nnet import MlpModel, load_checkpoint, save_checkpoint
from .partition import color_edges, split_strips
from .train2d import (
    GeodesicConfig,
    MedialConfig,
    TrainingDiverged,
    TrainingLog,
    geodesic_feature_set,
    medial_feature_set,
    train_geodesic,
    train_medial,
)
from .train3d import BOOLEAN_OPS, Train3DConfig, boolean_combine, normalize_points, train_sdf

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERIC = 2

NUMERIC_ERRORS = (TrainingDiverged, FloatingPointError, np.linalg.LinAlgError)

FIT_MODES = {"fit-mesh": "mesh", "fit-points-normals": "points_normals", "fit-points": "points"}


class PipelineRunner:
    def __init__(self, config: RunConfig):
        self.config = config
        self.out = Path(config.out)
        self.logger = logging.getLogger("sharpfield.runner")
        self.handlers = {
            "fit-geodesic": self.fit_geodesic,
            "learn-medial": self.learn_medial,
            "feature-from-mesh": self.feature_from_mesh,
            "feature-from-points": self.feature_from_points,
            "fit-mesh": self.fit_surface,
            "fit-points-normals": self.fit_surface,
            "fit-points": self.fit_surface,
            "extract": self.extract,
            "sample-field": self.sample_field,
            "boolean": self.boolean,
            "eval": self.evaluate,
        }

    def run(self) -> int:
        cfg = self.config
        self.logger.info(f"{cfg.command}: seed {cfg.seed}, {cfg.threads} threads, output in {self.out}")
        self.logger.debug(f"Config hash {cfg.hash}")
        try:
            self.out.mkdir(parents=True, exist_ok=True)
            self.handlers[cfg.command]()
        except TrainingDiverged as e:
            self.logger.error(f"Training diverged at iteration {e.iteration}: {e}")
            self._save_model(e.model, "diverged.snm")
            if e.features is not None:
                self._save_features(e.features, e.model.feature_scale, "diverged_features")
            return EXIT_NUMERIC
        except NUMERIC_ERRORS as e:
            self.logger.error(f"Numeric failure: {e}")
            return EXIT_NUMERIC
        except (ConfigError, OSError, ValueError) as e:
            self.logger.error(str(e))
            return EXIT_USAGE
        return EXIT_OK

    # -- artifact helpers -------------------------------------------------------

    def _provenance(self) -> list[str]:
        return [f"seed={self.config.seed} config={self.config.hash}"]

    def _metadata(self, **extra) -> dict:
        return {"seed": self.config.seed, "config_hash": self.config.hash, "command": self.config.command, **extra}

    def _log(self, columns: list[str]) -> TrainingLog:
        return TrainingLog(self.out / "log.csv", columns, self._provenance())

    def _save_model(self, model: MlpModel, name: str = "model.snm") -> Path:
        path = self.out / name
        save_checkpoint(path, model, self.config.seed, self.config.hash)
        self.logger.info(f"Checkpoint written to {path}")
        return path

    def _save_features(self, fs: FeatureSet, scale: float, stem: str = "features") -> Path:
        path = self.out / (stem + (".fg" if fs.dim == 2 else ".obj"))
        save_feature_set(path, fs, scale, self._provenance())
        return path

    def _save_normalization(self, transform, source: str):
        path = self.out / "normalization.json"
        path.write_text(json.dumps(
            {"source": source, "center": transform.center.tolist(), "scale": transform.scale, **self._metadata()},
            indent=2,
        ))

    def _write_grid(self, grid, name: str, **extra):
        path = self.out / name
        write_field_grid(path, grid, self._metadata(**extra))
        if grid.dim == 2:
            write_grid_preview(grid, path.with_suffix(".png"))
        self.logger.info(f"Field grid written to {path}")

    def _bbox(self, dim: int, default: tuple) -> tuple[np.ndarray, np.ndarray]:
        values = self.config.setting("bbox", None, tuple)
        if values is None:
            lo, hi = default
            return np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
        if len(values) != 2 * dim:
            raise ConfigError(f"--bbox needs {2 * dim} numbers for a {dim}D field")
        lo, hi = np.asarray(values[:dim]), np.asarray(values[dim:])
        if np.any(hi <= lo):
            raise ConfigError("--bbox max must exceed min on every axis")
        return lo, hi

    def _resolution(self, default: int) -> int:
        res = self.config.setting("resolution", default, int)
        if res < 2:
            raise ConfigError("--res must be at least 2")
        return res

    def _load_model(self, checkpoint: str, features: Optional[str]) -> tuple[MlpModel, Optional[FeatureSet]]:
        model, info = load_checkpoint(checkpoint)
        self.logger.info(
            f"Loaded {checkpoint}: {model.arch.input_dim}D, {model.arch.n_channels} channels, "
            f"seed {info.seed}, config {info.config_hash[:12] or 'unknown'}"
        )
        fs = None
        if features is not None:
            fs, _ = load_feature_set(features)
        if model.arch.n_channels and fs is None:
            raise ConfigError(f"{checkpoint} was trained with features; pass its feature file")
        if fs is not None and fs.n_channels != model.arch.n_channels:
            raise ConfigError(
                f"{features} has {fs.n_channels} channels, the model expects {model.arch.n_channels}"
            )
        return model, fs

    # -- 2D experiments -----------------------------------------------------------

    def _field_preview(self, model: MlpModel, fs: Optional[FeatureSet], lo, hi, res: int, name: str = "field.sfg"):
        grid = sample_grid(model, fs, lo, hi, (res, res), self.config.threads)
        self._write_grid(grid, name)

    def fit_geodesic(self):
        cfg = replace(self.config.configure(GeodesicConfig()), seed=self.config.seed)
        res = self._resolution(256)
        self.config.check_unused()
        log = self._log(["iter", "loss", "band_value_err", "band_grad_err"])
        model = train_geodesic(cfg, log)
        self._save_model(model)
        fs = geodesic_feature_set(cfg.scene, cfg.ray_spacing, cfg.radius) if cfg.use_features else None
        if fs is not None:
            self._save_features(fs, model.feature_scale)
        x0, x1, y0, y1 = cfg.scene.domain
        self._field_preview(model, fs, (x0, y0), (x1, y1), res)

    def learn_medial(self):
        cfg = replace(self.config.configure(MedialConfig()), seed=self.config.seed)
        res = self._resolution(256)
        self.config.check_unused()
        self._save_features(medial_feature_set(cfg), 1.0, "features_initial")
        log = self._log(["iter", "loss", "axis_chamfer"])
        model, fs = train_medial(cfg, log)
        self._save_model(model)
        self._save_features(fs, model.feature_scale)
        w, h = cfg.scene.half_width, cfg.scene.half_height
        self._field_preview(model, fs, (-w, -h), (w, h), res)

    # -- feature strips -----------------------------------------------------------

    def _featgen_config(self) -> FeatGenConfig:
        cfg = self.config.configure(FeatGenConfig())
        degrees = self.config.setting("threshold_degrees", None, float)
        if degrees is not None:
            cfg = replace(cfg, threshold=math.radians(degrees))
        return cfg

    def _write_strips(self, graph, strips, radius: float):
        coloring = color_edges(graph)
        fs = split_strips(strips, coloring, MollifierConfig(radius))
        save_feature_set(self.out / "strips.obj", fs, 1.0, self._provenance())
        write_feature_graph(self.out / "sharp.fg", graph.with_colors(coloring.colors), self._provenance())
        self.logger.info(
            f"{graph.n_edges} sharp segments in {coloring.n_colors} channels, "
            f"{fs.n_elements} strip triangles written to {self.out / 'strips.obj'}"
        )

    def feature_from_mesh(self):
        cfg = self._featgen_config()
        radius = self.config.setting("radius", Train3DConfig.radius, float)
        self.config.check_unused()
        mesh = read_obj(self.config.inputs[0])
        vertices, transform = normalize_points(mesh.vertices)
        graph, strips = strips_from_mesh(TriMesh(vertices, mesh.faces), cfg)
        self._write_strips(graph, strips, radius)
        self._save_normalization(transform, Path(self.config.inputs[0]).name)

    def feature_from_points(self):
        cfg = self._featgen_config()
        radius = self.config.setting("radius", Train3DConfig.radius, float)
        self.config.check_unused()
        cloud_path, graph_path = self.config.inputs
        cloud = read_xyz(cloud_path)
        points, transform = normalize_points(cloud.points)
        cloud = PointCloud(points, cloud.normals)
        if graph_path is not None:
            graph, _ = read_feature_graph(graph_path)
            if graph.dim != 3:
                raise ConfigError(f"{graph_path}: sharp curves must be 3D")
            graph = graph.with_vertices(transform.apply(graph.vertices))
        else:
            self.logger.info("No sharp curves given; estimating them from the cloud")
            graph = sharp_graph_from_cloud(cloud, cfg.knn)
        graph, strips = strips_from_points(graph, cloud, cfg)
        self._write_strips(graph, strips, radius)
        self._save_normalization(transform, Path(cloud_path).name)

    # -- 3D fitting ---------------------------------------------------------------

    def _training_cloud(self, path: str, mode: str, cfg: Train3DConfig) -> PointCloud:
        if path.lower().endswith(".obj"):
            mesh = read_obj(path)
            vertices, transform = normalize_points(mesh.vertices)
            points, normals = sample_surface(TriMesh(vertices, mesh.faces), cfg.sampling.surface_total, cfg.seed)
            cloud = PointCloud(points, normals)
        else:
            raw = read_xyz(path)
            points, transform = normalize_points(raw.points)
            cloud = PointCloud(points, raw.normals if mode != "points" else None)
        self._save_normalization(transform, Path(path).name)
        return cloud

    def fit_surface(self):
        mode = FIT_MODES[self.config.command]
        cfg = replace(self.config.configure(Train3DConfig(mode=mode)), seed=self.config.seed, mode=mode)
        cfg = self.config.configure(replace(cfg, weights=cfg.resolved_weights()))
        self.config.check_unused()
        shape_path, features_path = self.config.inputs

        fs0 = None
        if features_path is not None and cfg.use_features:
            fs0, _ = load_feature_set(features_path)
            if fs0.dim != 3:
                raise ConfigError(f"{features_path}: strips must be a 3D OBJ")
            fs0 = replace(fs0, mollifier=MollifierConfig(cfg.radius))
        elif cfg.use_features:
            self.logger.warning("No feature strips given; training a plain MLP")
            cfg = replace(cfg, use_features=False)

        cloud = self._training_cloud(shape_path, mode, cfg)
        log = self._log(["epoch", "loss", "sur", "ext", "ekl", "nor", "reg"])
        model, fs = train_sdf(cloud, fs0, cfg, log)
        self._save_model(model)
        if fs is not None:
            self._save_features(fs, model.feature_scale)

    # -- fields ---------------------------------------------------------------

    def extract(self):
        checkpoint, features = self.config.inputs
        model, fs = self._load_model(checkpoint, features)
        dim = model.arch.input_dim
        lo, hi = self._bbox(dim, ((-1.0,) * dim, (1.0,) * dim))
        res = self._resolution(128 if dim == 3 else 256)
        self.config.check_unused()
        if dim == 3:
            mesh = extract_mesh(model, fs, lo, hi, res, self.config.threads)
            write_obj(self.out / "mesh.obj", mesh, comments=self._provenance())
            self.logger.info(f"Mesh written to {self.out / 'mesh.obj'}")
            return
        grid = sample_grid(model, fs, lo, hi, (res, res), self.config.threads)
        curves = marching_squares(grid, 0.0)
        points = [np.hstack([c, np.zeros((len(c), 1))]) for c in curves]
        vertices = np.concatenate(points) if points else np.zeros((0, 3))
        lines, start = [], 0
        for c in points:
            idx = np.arange(start, start + len(c))
            lines.append(np.stack([idx[:-1], idx[1:]], axis=1))
            start += len(c)
        lines = np.concatenate(lines) if lines else np.zeros((0, 2), dtype=np.int64)
        write_obj(
            self.out / "curves.obj",
            TriMesh(vertices, np.zeros((0, 3), dtype=np.int64)),
            comments=self._provenance(),
            lines=lines,
        )
        self.logger.info(f"{len(curves)} zero-level curves written to {self.out / 'curves.obj'}")

    def sample_field(self):
        checkpoint, features = self.config.inputs
        model, fs = self._load_model(checkpoint, features)
        dim = model.arch.input_dim
        lo, hi = self._bbox(dim, ((-1.0,) * dim, (1.0,) * dim))
        res = self._resolution(256 if dim == 2 else 64)
        self.config.check_unused()
        grid = sample_grid(model, fs, lo, hi, (res,) * dim, self.config.threads)
        self._write_grid(grid, "field.sfg", checkpoint=Path(checkpoint).name)

    def boolean(self):
        path_a, path_b, features_a, features_b = self.config.inputs
        op = self.config.setting("op", "union")
        if op not in BOOLEAN_OPS:
            raise ConfigError(f"unknown boolean operation '{op}', expected one of {BOOLEAN_OPS}")
        model_a, fs_a = self._load_model(path_a, features_a)
        model_b, fs_b = self._load_model(path_b, features_b)
        if model_a.arch.input_dim != model_b.arch.input_dim:
            raise ConfigError("boolean operands must have the same dimension")
        dim = model_a.arch.input_dim
        lo, hi = self._bbox(dim, ((-1.0,) * dim, (1.0,) * dim))
        res = self._resolution(64)
        self.config.check_unused()
        combined = boolean_combine(model_value_fn(model_a, fs_a), model_value_fn(model_b, fs_b), op)
        grid = sample_function(combined, lo, hi, (res,) * dim, self.config.threads)
        self._write_grid(grid, "boolean.sfg", op=op)

    def evaluate(self):
        reference_path, candidate_path, features = self.config.inputs
        cfg = replace(self.config.configure(MetricsConfig()), seed=self.config.seed)
        res = self._resolution(128)
        self.config.check_unused()
        reference = read_obj(reference_path)
        if candidate_path.lower().endswith(".obj"):
            candidate = read_obj(candidate_path)
        else:
            # checkpoints live in the normalized frame of the reference
            model, fs = self._load_model(candidate_path, features)
            if model.arch.input_dim != 3:
                raise ConfigError("eval needs a 3D model")
            vertices, _ = normalize_points(reference.vertices)
            reference = TriMesh(vertices, reference.faces)
            candidate = extract_mesh(model, fs, (-1.0,) * 3, (1.0,) * 3, res, self.config.threads)
            write_obj(self.out / "mesh.obj", candidate, comments=self._provenance())
        report = evaluate_meshes(reference, candidate, cfg)
        print(report.csv_header())
        print(report.csv_row())
        print(report.pretty())
        (self.out / "metrics.csv").write_text(report.csv_header() + "\n" + report.csv_row() + "\n")
