//! Python bindings for the core grid-flow types and operations.
//!
//! Build with `cargo build -p flowcount-py --release` and rename the
//! produced `libflowcount_py.so` to `flowcount_py.so` somewhere on the
//! Python path (see python/smoke_test.py).

use flowcount::grid::{
    conservation_violation_map, DensityMap, DensityMode, FlowDirection, FlowField, GridShape,
};
use flowcount::render::{render_density, AnnotationFrame, KernelSpec};
use flowcount::sim::{self, MotionModel, SimConfig};
use flowcount::train::{mae_rmse, violation_score, PatchRegion};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn to_py_err(e: flowcount::FlowError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyclass(name = "GridShape", frozen)]
#[derive(Clone, Copy)]
struct PyGridShape {
    inner: GridShape,
}

#[pymethods]
impl PyGridShape {
    #[new]
    fn new(rows: usize, cols: usize, cell_px: usize) -> PyResult<Self> {
        Ok(PyGridShape {
            inner: GridShape::new(rows, cols, cell_px).map_err(to_py_err)?,
        })
    }

    #[getter]
    fn rows(&self) -> usize {
        self.inner.rows
    }

    #[getter]
    fn cols(&self) -> usize {
        self.inner.cols
    }

    #[getter]
    fn cell_px(&self) -> usize {
        self.inner.cell_px
    }

    fn neighbors(&self, cell: usize) -> PyResult<Vec<usize>> {
        self.inner.neighbors(cell).map_err(to_py_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "GridShape(rows={}, cols={}, cell_px={})",
            self.inner.rows, self.inner.cols, self.inner.cell_px
        )
    }
}

#[pyclass(name = "FlowField")]
#[derive(Clone)]
struct PyFlowField {
    inner: FlowField,
}

#[pymethods]
impl PyFlowField {
    /// Builds a field from a flat list of `rows * cols * 10` values in
    /// cell-major order; validates the structural invariants.
    #[new]
    #[pyo3(signature = (shape, values, forward=true))]
    fn new(shape: &PyGridShape, values: Vec<f64>, forward: bool) -> PyResult<Self> {
        let direction = if forward {
            FlowDirection::Forward
        } else {
            FlowDirection::Backward
        };
        Ok(PyFlowField {
            inner: FlowField::from_raw(shape.inner, direction, values).map_err(to_py_err)?,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (shape, forward=true))]
    fn zeros(shape: &PyGridShape, forward: bool) -> Self {
        let direction = if forward {
            FlowDirection::Forward
        } else {
            FlowDirection::Backward
        };
        PyFlowField {
            inner: FlowField::zeros(shape.inner, direction),
        }
    }

    fn values(&self) -> Vec<f64> {
        self.inner.values().to_vec()
    }

    #[getter]
    fn forward(&self) -> bool {
        self.inner.direction() == FlowDirection::Forward
    }

    fn get(&self, cell: usize, channel: usize) -> f64 {
        self.inner.get(cell, channel)
    }

    /// The same flows seen from the other end of the frame pair.
    fn reversed(&self) -> PyFlowField {
        PyFlowField {
            inner: self.inner.reversed(),
        }
    }

    /// People counts from the flow sums; `mode` is "incoming" or
    /// "outgoing".
    fn density(&self, mode: &str) -> PyResult<PyDensityMap> {
        let mode = match mode {
            "incoming" => DensityMode::Incoming,
            "outgoing" => DensityMode::Outgoing,
            other => {
                return Err(PyValueError::new_err(format!(
                    "mode must be 'incoming' or 'outgoing', got {other:?}"
                )))
            }
        };
        Ok(PyDensityMap {
            inner: self.inner.density(mode),
        })
    }
}

#[pyclass(name = "DensityMap")]
#[derive(Clone)]
struct PyDensityMap {
    inner: DensityMap,
}

#[pymethods]
impl PyDensityMap {
    #[new]
    fn new(shape: &PyGridShape, values: Vec<f64>) -> PyResult<Self> {
        Ok(PyDensityMap {
            inner: DensityMap::from_values(shape.inner, values).map_err(to_py_err)?,
        })
    }

    fn values(&self) -> Vec<f64> {
        self.inner.values().to_vec()
    }

    fn total(&self) -> f64 {
        self.inner.total()
    }

    fn average_with(&self, other: &PyDensityMap) -> PyResult<PyDensityMap> {
        Ok(PyDensityMap {
            inner: self.inner.average_with(&other.inner).map_err(to_py_err)?,
        })
    }
}

/// Per-cell |incoming(f_in) - outgoing(f_out)|.
#[pyfunction]
fn conservation_violation(f_in: &PyFlowField, f_out: &PyFlowField) -> PyResult<Vec<f64>> {
    conservation_violation_map(&f_in.inner, &f_out.inner).map_err(to_py_err)
}

/// Conservation violation summed over a cell rectangle.
#[pyfunction]
fn patch_violation_score(
    f_in: &PyFlowField,
    f_out: &PyFlowField,
    r0: usize,
    c0: usize,
    rows: usize,
    cols: usize,
) -> PyResult<f64> {
    violation_score(
        &f_in.inner,
        &f_out.inner,
        &PatchRegion { r0, c0, rows, cols },
    )
    .map_err(to_py_err)
}

/// Renders head points (pixel coordinates) into a density map with a
/// truncated Gaussian kernel (`sigma` in cells).
#[pyfunction]
#[pyo3(signature = (shape, heads, sigma=2.0, truncation_radius=4.0))]
fn render_head_density(
    shape: &PyGridShape,
    heads: Vec<(f64, f64)>,
    sigma: f64,
    truncation_radius: f64,
) -> PyResult<PyDensityMap> {
    let kernel = KernelSpec::new(sigma, truncation_radius).map_err(to_py_err)?;
    let frame = AnnotationFrame::new(0, heads);
    Ok(PyDensityMap {
        inner: render_density(&frame, &kernel, shape.inner).map_err(to_py_err)?,
    })
}

/// Runs the crowd simulator and returns, per consecutive frame pair, the
/// exact ground-truth flow field, plus the per-cell head counts per frame.
#[pyfunction]
#[pyo3(signature = (shape, n_agents, n_frames, seed, motion_model="lanes", speed_max=0.5, entry_rate=0.0, exit_enabled=false))]
#[allow(clippy::too_many_arguments)]
fn simulate_ground_truth(
    shape: &PyGridShape,
    n_agents: usize,
    n_frames: usize,
    seed: u64,
    motion_model: &str,
    speed_max: f64,
    entry_rate: f64,
    exit_enabled: bool,
) -> PyResult<(Vec<Vec<f64>>, Vec<PyFlowField>)> {
    let motion_model = match motion_model {
        "lanes" => MotionModel::Lanes,
        "swirl" => MotionModel::Swirl,
        "random-walk" => MotionModel::RandomWalk,
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown motion model {other:?}"
            )))
        }
    };
    let config = SimConfig {
        shape: shape.inner,
        n_agents,
        speed_max,
        entry_rate,
        exit_enabled,
        motion_model,
        seed,
        n_frames,
    };
    let states = sim::run(&config).map_err(to_py_err)?;
    let counts = states.iter().map(|s| s.counts(shape.inner)).collect();
    let flows = states
        .windows(2)
        .map(|w| {
            Ok(PyFlowField {
                inner: sim::ground_truth_flow(&w[0], &w[1], shape.inner).map_err(to_py_err)?,
            })
        })
        .collect::<PyResult<Vec<_>>>()?;
    Ok((counts, flows))
}

/// Mean absolute error and root-mean-square error between count lists.
#[pyfunction]
fn evaluate_mae_rmse(truth: Vec<f64>, predicted: Vec<f64>) -> PyResult<(f64, f64)> {
    mae_rmse(&truth, &predicted).map_err(to_py_err)
}

#[pymodule]
fn flowcount_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGridShape>()?;
    m.add_class::<PyFlowField>()?;
    m.add_class::<PyDensityMap>()?;
    m.add_function(wrap_pyfunction!(conservation_violation, m)?)?;
    m.add_function(wrap_pyfunction!(patch_violation_score, m)?)?;
    m.add_function(wrap_pyfunction!(render_head_density, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_ground_truth, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_mae_rmse, m)?)?;
    m.add("SELF_CHANNEL", flowcount::grid::SELF_CHANNEL)?;
    m.add("OUTSIDE_CHANNEL", flowcount::grid::OUTSIDE_CHANNEL)?;
    m.add("CHANNELS", flowcount::grid::CHANNELS)?;
    Ok(())
}
