//! Block-sparse damped normal equations and their Schur-complement solve.
//!
//! Unknowns are ordered pose blocks (6) first, then point blocks (3). Each
//! residual touches at most one pose and one point, so the pose-pose and
//! point-point parts are block diagonal and only the pose-point coupling is
//! sparse.

use std::collections::BTreeMap;
use std::ops::AddAssign;

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, Matrix6x3, Vector3, Vector6};

use crate::error::SolverError;

/// `H = Σ Jᵀ W J` and `b = −Σ Jᵀ W r` accumulated per block.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalEquations {
    pub pose_hessians: Vec<Matrix6<f64>>,
    pub point_hessians: Vec<Matrix3<f64>>,
    pub coupling: BTreeMap<(usize, usize), Matrix6x3<f64>>,
    pub pose_rhs: Vec<Vector6<f64>>,
    pub point_rhs: Vec<Vector3<f64>>,
}

/// Solution of the damped system, split like the unknowns.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub poses: Vec<Vector6<f64>>,
    pub points: Vec<Vector3<f64>>,
}

impl Step {
    pub fn norm(&self) -> f64 {
        let s: f64 = self.poses.iter().map(|v| v.norm_squared()).sum::<f64>()
            + self.points.iter().map(|v| v.norm_squared()).sum::<f64>();
        s.sqrt()
    }

    pub fn to_dvector(&self) -> DVector<f64> {
        let mut out = Vec::with_capacity(6 * self.poses.len() + 3 * self.points.len());
        for p in &self.poses {
            out.extend(p.iter());
        }
        for p in &self.points {
            out.extend(p.iter());
        }
        DVector::from_vec(out)
    }

    fn from_dvector(x: &DVector<f64>, n_poses: usize, n_points: usize) -> Self {
        let poses = (0..n_poses).map(|i| x.fixed_rows::<6>(6 * i).into_owned()).collect();
        let off = 6 * n_poses;
        let points = (0..n_points).map(|i| x.fixed_rows::<3>(off + 3 * i).into_owned()).collect();
        Step { poses, points }
    }
}

impl NormalEquations {
    pub fn new(n_poses: usize, n_points: usize) -> Self {
        Self {
            pose_hessians: vec![Matrix6::zeros(); n_poses],
            point_hessians: vec![Matrix3::zeros(); n_points],
            coupling: BTreeMap::new(),
            pose_rhs: vec![Vector6::zeros(); n_poses],
            point_rhs: vec![Vector3::zeros(); n_points],
        }
    }

    pub fn n_poses(&self) -> usize {
        self.pose_hessians.len()
    }

    pub fn n_points(&self) -> usize {
        self.point_hessians.len()
    }

    pub fn dim(&self) -> usize {
        6 * self.n_poses() + 3 * self.n_points()
    }

    /// Adds one residual block with Jacobian columns split into an optional
    /// pose part and an optional point part. `r` has `R` rows and `weight`
    /// is the scalar information (already multiplied by any robust
    /// attenuation).
    pub fn add_residual<const R: usize>(
        &mut self,
        pose: Option<(usize, &nalgebra::SMatrix<f64, R, 6>)>,
        point: Option<(usize, &nalgebra::SMatrix<f64, R, 3>)>,
        r: &nalgebra::SVector<f64, R>,
        weight: f64,
    ) {
        if let Some((i, jp)) = pose {
            self.pose_hessians[i] += weight * jp.transpose() * jp;
            self.pose_rhs[i] -= weight * jp.transpose() * r;
        }
        if let Some((l, jl)) = point {
            self.point_hessians[l] += weight * jl.transpose() * jl;
            self.point_rhs[l] -= weight * jl.transpose() * r;
        }
        if let (Some((i, jp)), Some((l, jl))) = (pose, point) {
            let block = weight * jp.transpose() * jl;
            *self.coupling.entry((i, l)).or_insert_with(Matrix6x3::zeros) += block;
        }
    }

    /// Full symmetric `H` (without damping).
    pub fn dense_hessian(&self) -> DMatrix<f64> {
        let n = self.dim();
        let off = 6 * self.n_poses();
        let mut h = DMatrix::zeros(n, n);
        for (i, b) in self.pose_hessians.iter().enumerate() {
            h.fixed_view_mut::<6, 6>(6 * i, 6 * i).copy_from(b);
        }
        for (l, b) in self.point_hessians.iter().enumerate() {
            h.fixed_view_mut::<3, 3>(off + 3 * l, off + 3 * l).copy_from(b);
        }
        for (&(i, l), b) in &self.coupling {
            h.fixed_view_mut::<6, 3>(6 * i, off + 3 * l).copy_from(b);
            h.fixed_view_mut::<3, 6>(off + 3 * l, 6 * i).copy_from(&b.transpose());
        }
        h
    }

    pub fn dense_rhs(&self) -> DVector<f64> {
        Step {
            poses: self.pose_rhs.clone(),
            points: self.point_rhs.clone(),
        }
        .to_dvector()
    }

    /// Solves `(H + βI) δ = b` by dense Cholesky on the full system.
    pub fn solve_dense(&self, beta: f64) -> Result<Step, SolverError> {
        let mut h = self.dense_hessian();
        for k in 0..h.nrows() {
            h[(k, k)] += beta;
        }
        let x = h
            .cholesky()
            .ok_or(SolverError::SingularSystem)?
            .solve(&self.dense_rhs());
        Ok(Step::from_dvector(&x, self.n_poses(), self.n_points()))
    }

    /// Solves `(H + βI) δ = b` by eliminating the point blocks first.
    pub fn solve_schur(&self, beta: f64) -> Result<Step, SolverError> {
        let np = self.n_poses();
        let damp3 = Matrix3::identity() * beta;
        let point_inv: Vec<Matrix3<f64>> = self
            .point_hessians
            .iter()
            .map(|h| {
                (h + damp3)
                    .cholesky()
                    .map(|c| c.inverse())
                    .ok_or(SolverError::SingularSystem)
            })
            .collect::<Result<_, _>>()?;

        if np == 0 {
            let points = point_inv.iter().zip(&self.point_rhs).map(|(hi, b)| hi * b).collect();
            return Ok(Step {
                poses: Vec::new(),
                points,
            });
        }

        let mut s = DMatrix::<f64>::zeros(6 * np, 6 * np);
        let mut rhs = DVector::<f64>::zeros(6 * np);
        for (i, h) in self.pose_hessians.iter().enumerate() {
            s.fixed_view_mut::<6, 6>(6 * i, 6 * i)
                .copy_from(&(h + Matrix6::identity() * beta));
            rhs.fixed_rows_mut::<6>(6 * i).copy_from(&self.pose_rhs[i]);
        }
        // Group couplings by point to form W H_ll⁻¹ Wᵀ.
        let mut by_point: BTreeMap<usize, Vec<(usize, &Matrix6x3<f64>)>> = BTreeMap::new();
        for (&(i, l), w) in &self.coupling {
            by_point.entry(l).or_default().push((i, w));
        }
        for (&l, blocks) in &by_point {
            let hinv = &point_inv[l];
            let hb = hinv * self.point_rhs[l];
            for &(i, wi) in blocks {
                let wi_hinv = wi * hinv;
                let mut r = rhs.fixed_rows_mut::<6>(6 * i);
                r -= wi * hb;
                for &(j, wj) in blocks {
                    let mut sb = s.fixed_view_mut::<6, 6>(6 * i, 6 * j);
                    sb -= wi_hinv * wj.transpose();
                }
            }
        }
        let dp = match s.clone().cholesky() {
            Some(c) => c.solve(&rhs),
            None => s.lu().solve(&rhs).ok_or(SolverError::SingularSystem)?,
        };
        if dp.iter().any(|x| !x.is_finite()) {
            return Err(SolverError::SingularSystem);
        }
        let poses: Vec<Vector6<f64>> = (0..np).map(|i| dp.fixed_rows::<6>(6 * i).into_owned()).collect();
        let mut points: Vec<Vector3<f64>> = self.point_rhs.clone();
        for (&(i, l), w) in &self.coupling {
            points[l] -= w.transpose() * poses[i];
        }
        for (p, hinv) in points.iter_mut().zip(&point_inv) {
            *p = hinv * *p;
        }
        Ok(Step { poses, points })
    }

    /// Decrease of the quadratic model `E ≈ E₀ − 2bᵀδ + δᵀHδ` (undamped H).
    pub fn predicted_decrease(&self, step: &Step) -> f64 {
        let x = step.to_dvector();
        let hx = self.dense_product(&x);
        2.0 * x.dot(&self.dense_rhs()) - x.dot(&hx)
    }

    fn dense_product(&self, x: &DVector<f64>) -> DVector<f64> {
        let off = 6 * self.n_poses();
        let mut y = DVector::zeros(x.len());
        for (i, b) in self.pose_hessians.iter().enumerate() {
            let v = b * x.fixed_rows::<6>(6 * i);
            y.fixed_rows_mut::<6>(6 * i).add_assign(&v);
        }
        for (l, b) in self.point_hessians.iter().enumerate() {
            let v = b * x.fixed_rows::<3>(off + 3 * l);
            y.fixed_rows_mut::<3>(off + 3 * l).add_assign(&v);
        }
        for (&(i, l), w) in &self.coupling {
            let a = w * x.fixed_rows::<3>(off + 3 * l);
            let b = w.transpose() * x.fixed_rows::<6>(6 * i);
            y.fixed_rows_mut::<6>(6 * i).add_assign(&a);
            y.fixed_rows_mut::<3>(off + 3 * l).add_assign(&b);
        }
        y
    }
}

/// One damped Gauss-Newton step: the Schur-complement solution together with
/// the decrease predicted by the local quadratic model.
pub fn lm_step(system: &NormalEquations, beta: f64) -> Result<(Step, f64), SolverError> {
    if !(beta > 0.0) {
        return Err(SolverError::Config("damping must be positive".into()));
    }
    let step = system.solve_schur(beta)?;
    let predicted = system.predicted_decrease(&step);
    Ok((step, predicted))
}
