//! End-to-end stages behind the `flowline` command line: synthetic data, MAP
//! inversion, L-curve, low-rank posterior, sampling and prediction.
//!
//! Stages communicate only through files in the output directory, so each can be
//! rerun on its own once its inputs exist.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adjoint::{relative_noise_sigma, GradientContext, InverseProblem, MisfitMode, ObservationSet, SolveCounts};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::fields::{fmt17, read_field, write_field};
use crate::inversion::{invert, lcurve_corner, lcurve_csv, lcurve_scan, InversionOutcome, InversionStart};
use crate::lowrank::LowRankPosterior;
use crate::mesh::{BoundaryTag, FlowlineMesh};
use crate::prediction::{predict, prediction_csv, PredictionReport};
use crate::prior::{PriorModel, PriorParams};
use crate::stokes::{ForwardSolution, StokesModel};

/// Named random substreams derived from the run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Noise = 1,
    Gevd = 2,
    PriorSamples = 3,
    PosteriorSamples = 4,
}

pub fn substream(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Forward,
    Synth,
    Invert,
    Lcurve,
    Spectrum,
    Sample,
    Predict,
    All,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Forward => "forward",
            Stage::Synth => "synth",
            Stage::Invert => "invert",
            Stage::Lcurve => "lcurve",
            Stage::Spectrum => "spectrum",
            Stage::Sample => "sample",
            Stage::Predict => "predict",
            Stage::All => "all",
        }
    }
}

/// Solve counts per stage.
#[derive(Debug, Clone, Default)]
pub struct Ledger {
    pub rows: Vec<(String, SolveCounts)>,
}

impl Ledger {
    pub fn push(&mut self, stage: &str, counts: SolveCounts) {
        self.rows.push((stage.to_string(), counts));
    }

    pub fn total(&self) -> SolveCounts {
        let mut t = SolveCounts::default();
        for (_, c) in &self.rows {
            t.forward_solves += c.forward_solves;
            t.forward_newton_steps += c.forward_newton_steps;
            t.residual_evaluations += c.residual_evaluations;
            t.adjoint_solves += c.adjoint_solves;
            t.incremental_solves += c.incremental_solves;
        }
        t
    }

    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let mut row = |name: &str, c: &SolveCounts| {
            let _ = writeln!(
                s,
                "{name}=forward_solves={} forward_newton_steps={} adjoint_solves={} incremental_solves={} linearized_solves={}",
                c.forward_solves,
                c.forward_newton_steps,
                c.adjoint_solves,
                c.incremental_solves,
                c.linearized_solves()
            );
        };
        for (name, c) in &self.rows {
            row(name, c);
        }
        row("total", &self.total());
        s
    }
}

/// Noisy surface data with its noise model and the truth that produced it.
#[derive(Debug, Clone)]
pub struct SynthData {
    pub beta_true: DVector<f64>,
    pub clean: Vec<f64>,
    pub d_obs: Vec<f64>,
    pub sigma: Vec<f64>,
}

pub struct Pipeline {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub threads: usize,
    pub mesh: Arc<FlowlineMesh>,
    pub model: Arc<StokesModel>,
    pub ledger: Ledger,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}

impl Pipeline {
    pub fn new(cfg: RunConfig, out: Option<PathBuf>, threads: Option<usize>) -> Result<Self> {
        cfg.validate()?;
        let out = out.unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
        std::fs::create_dir_all(&out)?;
        let m = &cfg.mesh;
        let mesh = Arc::new(FlowlineMesh::with_pressure_space(cfg.domain.clone(), m.nx, m.nz, m.k, m.pressure_space)?);
        let model = Arc::new(StokesModel::new(Arc::clone(&mesh), cfg.physics)?);
        Ok(Self {
            threads: threads.unwrap_or(cfg.threads).max(1),
            cfg,
            out,
            mesh,
            model,
            ledger: Ledger::default(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn require(&self, name: &str, stage: &'static str) -> Result<PathBuf> {
        let p = self.path(name);
        if p.is_file() {
            Ok(p)
        } else {
            Err(Error::MissingArtifact {
                path: p.display().to_string(),
                stage,
            })
        }
    }

    fn read_values(&self, name: &str, stage: &'static str, len: usize) -> Result<Vec<f64>> {
        let p = self.require(name, stage)?;
        let f = read_field(&p)?;
        if f.values.len() != len || f.dims != (self.mesh.nx, self.mesh.nz) || f.k != self.mesh.k {
            return Err(Error::Parse {
                file: p.display().to_string(),
                msg: format!("field does not match the configured {}x{} k={} mesh", self.mesh.nx, self.mesh.nz, self.mesh.k),
            });
        }
        Ok(f.values)
    }

    fn write_basal(&self, name: &str, values: &[f64]) -> Result<()> {
        write_field(&self.path(&format!("{name}.txt")), name, &self.mesh, &self.mesh.basal_coords(), values)
    }

    fn read_basal(&self, name: &str, stage: &'static str) -> Result<DVector<f64>> {
        let v = self.read_values(&format!("{name}.txt"), stage, self.mesh.basal_dof_count())?;
        Ok(DVector::from_vec(v))
    }

    fn surface_points(&self) -> Vec<[f64; 2]> {
        self.mesh.boundary_nodes(BoundaryTag::Top).iter().map(|&n| self.mesh.coords()[n]).collect()
    }

    pub fn beta_true(&self, mesh: &FlowlineMesh) -> DVector<f64> {
        DVector::from_iterator(mesh.basal_dof_count(), mesh.basal_coords().iter().map(|c| self.cfg.truth.eval(c[0])))
    }

    /// `beta_init = ln(init_factor * median exp(beta_true))`.
    pub fn beta_init(&self) -> DVector<f64> {
        let mut b: Vec<f64> = self.beta_true(&self.mesh).iter().copied().collect();
        b.sort_by(f64::total_cmp);
        let med = if b.len() % 2 == 1 {
            b[b.len() / 2]
        } else {
            0.5 * (b[b.len() / 2 - 1] + b[b.len() / 2])
        };
        DVector::from_element(self.mesh.basal_dof_count(), med + self.cfg.inversion.init_factor.ln())
    }

    fn count_forward(&mut self, stage: &str, sol: &ForwardSolution) {
        self.ledger.push(
            stage,
            SolveCounts {
                forward_solves: 1,
                forward_newton_steps: sol.record.newton_steps(),
                residual_evaluations: sol.record.residual_evaluations,
                ..SolveCounts::default()
            },
        );
    }

    /// Forward solve at the true basal field; dumps the state.
    pub fn forward(&mut self) -> Result<ForwardSolution> {
        let beta = self.beta_true(&self.mesh);
        let sol = self.model.solve_forward(beta.as_slice(), &self.cfg.forward, None)?;
        self.count_forward("forward", &sol);
        let st = self.model.state(&sol.x);
        let pts = self.mesh.coords();
        let ux: Vec<f64> = st.u.iter().step_by(2).copied().collect();
        let uz: Vec<f64> = st.u.iter().skip(1).step_by(2).copied().collect();
        write_field(&self.path("velocity_x.txt"), "velocity_x", &self.mesh, pts, &ux)?;
        write_field(&self.path("velocity_z.txt"), "velocity_z", &self.mesh, pts, &uz)?;
        let np = self.mesh.pressure_dofs_per_cell();
        let ppts: Vec<[f64; 2]> = self
            .mesh
            .cells()
            .iter()
            .flat_map(|c| {
                let n = c.nodes.len() as f64;
                let x = c.nodes.iter().map(|&i| pts[i][0]).sum::<f64>() / n;
                let z = c.nodes.iter().map(|&i| pts[i][1]).sum::<f64>() / n;
                std::iter::repeat_n([x, z], np)
            })
            .collect();
        write_field(&self.path("pressure.txt"), "pressure", &self.mesh, &ppts, &st.p)?;
        let max_u = st.u.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut rec = String::new();
        let _ = writeln!(rec, "newton_steps={}", sol.record.newton_steps());
        let _ = writeln!(rec, "initial_residual={}", fmt17(sol.record.initial_residual));
        let _ = writeln!(rec, "final_residual={}", fmt17(sol.record.final_residual()));
        let _ = writeln!(rec, "max_abs_velocity={}", fmt17(max_u));
        write_text(&self.path("forward.txt"), &rec)?;
        Ok(sol)
    }

    /// Surface data from a forward solve on a refined mesh, with relative noise.
    pub fn synth(&mut self) -> Result<SynthData> {
        let ff = self.cfg.truth.fine_factor;
        let m = &self.cfg.mesh;
        let fine = Arc::new(FlowlineMesh::with_pressure_space(
            self.cfg.domain.clone(),
            m.nx * ff,
            m.nz * ff,
            m.k,
            m.pressure_space,
        )?);
        let fine_model = StokesModel::new(Arc::clone(&fine), self.cfg.physics)?;
        let sol = fine_model.solve_forward(self.beta_true(&fine).as_slice(), &self.cfg.forward, None)?;
        self.count_forward("synth", &sol);
        let u = fine_model.dofs().expand_velocity(&sol.x);

        // Piecewise-linear transfer along the surface, exact at shared nodes.
        let mut fine_top: Vec<(f64, [f64; 2])> = fine
            .boundary_nodes(BoundaryTag::Top)
            .iter()
            .map(|&n| (fine.coords()[n][0], [u[2 * n], u[2 * n + 1]]))
            .collect();
        fine_top.sort_by(|a, b| a.0.total_cmp(&b.0));
        let pts = self.surface_points();
        let mut clean = Vec::with_capacity(2 * pts.len());
        for p in &pts {
            let j = fine_top.partition_point(|t| t.0 < p[0]).clamp(1, fine_top.len() - 1);
            let (x0, u0) = fine_top[j - 1];
            let (x1, u1) = fine_top[j];
            let tol = 1e-12 * x1.abs().max(1.0);
            let v = if (p[0] - x1).abs() <= tol {
                u1
            } else if (p[0] - x0).abs() <= tol {
                u0
            } else {
                let t = ((p[0] - x0) / (x1 - x0)).clamp(0.0, 1.0);
                [u0[0] + t * (u1[0] - u0[0]), u0[1] + t * (u1[1] - u0[1])]
            };
            clean.extend_from_slice(&v);
        }

        let nz = &self.cfg.noise;
        let sigma = relative_noise_sigma(&clean, nz.level, nz.eps_norm);
        let d_obs = if nz.level > 0.0 {
            let obs = ObservationSet::new(&self.mesh, clean.clone(), sigma.clone(), nz.eps_norm, MisfitMode::Bayesian)?;
            let noise = obs.sample_noise(&mut substream(self.cfg.seed, Stream::Noise))?;
            clean.iter().zip(&noise).map(|(a, b)| a + b).collect()
        } else {
            clean.clone()
        };

        let beta_true = self.beta_true(&self.mesh);
        self.write_basal("beta_true", beta_true.as_slice())?;
        let ox: Vec<f64> = d_obs.iter().step_by(2).copied().collect();
        let oz: Vec<f64> = d_obs.iter().skip(1).step_by(2).copied().collect();
        write_field(&self.path("obs_velocity_x.txt"), "obs_velocity_x", &self.mesh, &pts, &ox)?;
        write_field(&self.path("obs_velocity_z.txt"), "obs_velocity_z", &self.mesh, &pts, &oz)?;
        write_field(&self.path("obs_sigma.txt"), "obs_sigma", &self.mesh, &pts, &sigma)?;
        Ok(SynthData {
            beta_true,
            clean,
            d_obs,
            sigma,
        })
    }

    /// Observations written by [`Pipeline::synth`].
    pub fn load_data(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = self.surface_points().len();
        let ox = self.read_values("obs_velocity_x.txt", "synth", n)?;
        let oz = self.read_values("obs_velocity_z.txt", "synth", n)?;
        let sigma = self.read_values("obs_sigma.txt", "synth", n)?;
        let d = ox.iter().zip(&oz).flat_map(|(a, b)| [*a, *b]).collect();
        Ok((d, sigma))
    }

    /// Bayesian inverse problem on the stored data.
    pub fn bayesian_problem(&self) -> Result<InverseProblem> {
        let (d, sigma) = self.load_data()?;
        let obs = ObservationSet::new(&self.mesh, d, sigma, self.cfg.noise.eps_norm, MisfitMode::Bayesian)?;
        let prior = PriorModel::new(&self.mesh, self.cfg.prior)?;
        InverseProblem::new(Arc::clone(&self.model), obs, prior, self.cfg.forward)
    }

    /// MAP point of the Bayesian problem.
    pub fn invert(&mut self) -> Result<InversionOutcome> {
        let problem = self.bayesian_problem()?;
        let out = invert(&problem, &self.cfg.inversion.solver, &InversionStart::at(self.beta_init()));
        self.ledger.push("invert", problem.counts());
        let out = out?;
        self.write_basal("beta_map", out.beta.as_slice())?;
        let mut rec = format!("gamma={}\ndelta={}\nkappa={}\n", fmt17(self.cfg.prior.gamma), fmt17(self.cfg.prior.delta), fmt17(self.cfg.prior.kappa));
        rec.push_str(&out.record.to_key_values());
        write_text(&self.path("record.txt"), &rec)?;
        Ok(out)
    }

    /// Deterministic Tikhonov inversions over the configured `gamma` values.
    pub fn lcurve(&mut self) -> Result<Vec<crate::inversion::LCurvePoint>> {
        let (d, sigma) = self.load_data()?;
        let lc = &self.cfg.lcurve;
        let obs = ObservationSet::new(&self.mesh, d, sigma, self.cfg.noise.eps_norm, lc.misfit)?;
        let gammas = lc.values()?;
        let params = PriorParams {
            gamma: gammas[gammas.len() - 1],
            delta: lc.delta,
            kappa: lc.kappa,
            beta0: 0.0,
        };
        let prior = PriorModel::new(&self.mesh, params)?;
        let problem = InverseProblem::new(Arc::clone(&self.model), obs, prior, self.cfg.forward)?;
        let rows = lcurve_scan(&problem, &gammas, &self.cfg.inversion.solver, &self.beta_init());
        self.ledger.push("lcurve", problem.counts());
        let rows = rows?;
        write_text(&self.path("lcurve.csv"), &lcurve_csv(&rows))?;
        let mut rec = String::new();
        match lcurve_corner(&rows) {
            Some(i) => {
                let _ = writeln!(rec, "corner_index={i}\ncorner_gamma={}", fmt17(rows[i].gamma));
            }
            None => rec.push_str("corner_index=none\n"),
        }
        for r in rows.iter().filter(|r| r.error.is_some()) {
            let _ = writeln!(rec, "failed.{}={}", fmt17(r.gamma), r.error.as_deref().unwrap_or(""));
        }
        write_text(&self.path("lcurve.txt"), &rec)?;
        Ok(rows)
    }

    fn map_context(&mut self, problem: &InverseProblem) -> Result<GradientContext> {
        let beta = self.read_basal("beta_map", "invert")?;
        problem.gradient_context(&beta, None, None)
    }

    /// Low-rank posterior at the stored MAP point.
    pub fn spectrum(&mut self) -> Result<LowRankPosterior> {
        let problem = self.bayesian_problem()?;
        let ctx = self.map_context(&problem);
        let post = ctx.and_then(|ctx| {
            LowRankPosterior::at_map(&problem, &ctx, &self.cfg.gevd, &mut substream(self.cfg.seed, Stream::Gevd), self.threads)
        });
        self.ledger.push("spectrum", problem.counts());
        let post = post?;
        write_text(&self.path("spectrum.csv"), &post.spectrum_csv())?;
        for i in 0..post.rank() {
            let w: Vec<f64> = post.eigvecs.column(i).iter().copied().collect();
            self.write_basal(&format!("evec_{}", i + 1), &w)?;
        }
        self.write_basal("variance_prior", post.prior.pointwise_variance().as_slice())?;
        self.write_basal("variance_post", post.pointwise_variance()?.as_slice())?;
        let mut rec = String::new();
        let _ = writeln!(rec, "hessian={:?}", post.mode);
        let _ = writeln!(rec, "rank={}", post.rank());
        let _ = writeln!(rec, "threshold={}", fmt17(self.cfg.gevd.threshold));
        let _ = writeln!(rec, "spectrum_not_exhausted={}", post.not_exhausted);
        let _ = writeln!(rec, "orthonormality_error={}", fmt17(post.orthonormality_error()));
        let _ = writeln!(rec, "truncation_bound={}", fmt17(LowRankPosterior::truncation_bound(&post.discarded)));
        for (i, l) in post.discarded.iter().enumerate() {
            let _ = writeln!(rec, "discarded.{}={}", post.rank() + i + 1, fmt17(*l));
        }
        write_text(&self.path("spectrum.txt"), &rec)?;
        Ok(post)
    }

    /// Posterior rebuilt from `beta_map`, `spectrum.csv` and the eigenvector files.
    pub fn load_posterior(&self) -> Result<LowRankPosterior> {
        let beta = self.read_basal("beta_map", "invert")?;
        let p = self.require("spectrum.csv", "spectrum")?;
        let text = std::fs::read_to_string(&p)?;
        let perr = |msg: String| Error::Parse {
            file: p.display().to_string(),
            msg,
        };
        let mut lines = text.lines();
        if lines.next() != Some("index,lambda") {
            return Err(perr("missing `index,lambda` header".into()));
        }
        let mut vals = Vec::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let (_, l) = line.split_once(',').ok_or_else(|| perr(format!("bad row `{line}`")))?;
            vals.push(l.trim().parse::<f64>().map_err(|e| perr(format!("bad row `{line}`: {e}")))?);
        }
        let n = self.mesh.basal_dof_count();
        let mut w = DMatrix::zeros(n, vals.len());
        for j in 0..vals.len() {
            w.set_column(j, &self.read_basal(&format!("evec_{}", j + 1), "spectrum")?);
        }
        LowRankPosterior::new(beta, vals, w, PriorModel::new(&self.mesh, self.cfg.prior)?)
    }

    /// Prior and posterior draws of the basal field.
    pub fn sample(&mut self) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>)> {
        let post = self.load_posterior()?;
        let mut rp = substream(self.cfg.seed, Stream::PriorSamples);
        let mut rq = substream(self.cfg.seed, Stream::PosteriorSamples);
        let mut priors = Vec::new();
        let mut posts = Vec::new();
        for i in 0..self.cfg.sampling.count {
            let a = post.prior.sample(&mut rp);
            let b = post.sample(&mut rq);
            self.write_basal(&format!("sample_prior_{}", i + 1), a.as_slice())?;
            self.write_basal(&format!("sample_post_{}", i + 1), b.as_slice())?;
            priors.push(a);
            posts.push(b);
        }
        Ok((priors, posts))
    }

    /// Flux predictions with prior and posterior uncertainty.
    pub fn predict(&mut self) -> Result<Vec<PredictionReport>> {
        let post = self.load_posterior()?;
        let problem = self.bayesian_problem()?;
        let ctx = self.map_context(&problem);
        let reports: Result<Vec<PredictionReport>> =
            ctx.and_then(|ctx| self.cfg.qoi.iter().map(|q| predict(&problem, &ctx, &post, q)).collect());
        self.ledger.push("predict", problem.counts());
        let reports = reports?;
        write_text(&self.path("prediction.csv"), &prediction_csv(&reports))?;
        for r in &reports {
            self.write_basal(&format!("qoi_gradient_{}", r.tag), r.gradient.as_slice())?;
            self.write_basal(&format!("ifp_direction_{}", r.tag), r.direction.as_slice())?;
        }
        Ok(reports)
    }

    pub fn write_ledger(&self) -> Result<()> {
        write_text(&self.path("ledger.txt"), &self.ledger.to_key_values())
    }

    pub fn run(&mut self, stage: Stage) -> Result<()> {
        match stage {
            Stage::Forward => self.forward().map(|_| ()),
            Stage::Synth => self.synth().map(|_| ()),
            Stage::Invert => self.invert().map(|_| ()),
            Stage::Lcurve => self.lcurve().map(|_| ()),
            Stage::Spectrum => self.spectrum().map(|_| ()),
            Stage::Sample => self.sample().map(|_| ()),
            Stage::Predict => self.predict().map(|_| ()),
            Stage::All => {
                self.forward()?;
                self.synth()?;
                self.invert()?;
                self.lcurve()?;
                self.spectrum()?;
                self.sample()?;
                self.predict()?;
                Ok(())
            }
        }?;
        self.write_ledger()
    }
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;

    #[test]
    fn substreams_differ_and_repeat() {
        let a: u64 = substream(5, Stream::Noise).random();
        let b: u64 = substream(5, Stream::Noise).random();
        let c: u64 = substream(5, Stream::Gevd).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn missing_inputs_name_the_stage() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.mesh.nx = 8;
        cfg.mesh.nz = 2;
        let mut p = Pipeline::new(cfg, Some(dir.path().to_path_buf()), None).unwrap();
        match p.invert() {
            Err(Error::MissingArtifact { stage, .. }) => assert_eq!(stage, "synth"),
            other => panic!("unexpected {:?}", other.map(|_| ())),
        }
        match p.load_posterior() {
            Err(Error::MissingArtifact { stage, .. }) => assert_eq!(stage, "invert"),
            other => panic!("unexpected {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn zero_noise_data_is_the_clean_trace() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.mesh.nx = 8;
        cfg.mesh.nz = 2;
        cfg.noise.level = 0.0;
        cfg.truth.fine_factor = 1;
        let mut p = Pipeline::new(cfg, Some(dir.path().to_path_buf()), None).unwrap();
        let data = p.synth().unwrap();
        assert_eq!(data.d_obs, data.clean);
        let sol = p.model.solve_forward(data.beta_true.as_slice(), &p.cfg.forward, None).unwrap();
        let u = p.model.dofs().expand_velocity(&sol.x);
        let obs = ObservationSet::new(&p.mesh, data.clean.clone(), data.sigma.clone(), 1e-9, MisfitMode::Deterministic).unwrap();
        assert_eq!(obs.observe(&u).unwrap(), data.clean);
        let (d, _) = p.load_data().unwrap();
        assert_eq!(d, data.d_obs);
    }
}
