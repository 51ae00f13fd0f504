"""Cross-metric root-cause analysis over dimension trees."""
from .core import (AGG, DimensionSchema, DimensionTree, MetricPanel, MetricSchema,
                   aggregate_panel, build_tree, format_key, parse_key)
from .errors import (DivergenceError, FormulaDomainError, FormulaError, FormulaSyntaxError,
                     IngestError, NoAnomalyError, NoCandidateError, RcaError, SchemaError)
from .evaluation import AdtributorConfig, EvalReport, adtributor, ground_truth, js_divergence, prf1
from .forecast import ArModel, ForecastPanel, detect_3sigma, fit_ar, forecast_panel
from .formula import evaluate_formula, parse_formula
from .gat import GatConfig, GatModel, TrainingLog, train
from .ingest import DatasetManifest, ValidationReport, load_csv, validate_panel
from .localize import (GaConfig, LocalizeConfig, RootCauseReport, backtrack, filter_candidates,
                       fitness, ga_search, localize)
from .oracle import ExactModel
from .synth import GroundTruthLabel, SynthConfig, generate_dataset, inject_anomalies

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
