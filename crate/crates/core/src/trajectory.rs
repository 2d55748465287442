//! Sampled observables and their CSV persistence.
//!
//! A trajectory file starts with `#`-prefixed `key=value` metadata lines,
//! followed by one header row and one row per sample. Column names carry
//! their units. A run that fails appends `# ERROR code=<name> step=<k>`.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::hartree::EnergyBreakdown;

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryMeta {
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub n_molecules: usize,
    pub n_modes: usize,
    /// Integrator time step (a.u.).
    pub dt: f64,
    pub stride: usize,
    /// Cavity frequencies (hartree).
    pub omega_cavity: Vec<f64>,
    pub has_polarization: bool,
}

impl TrajectoryMeta {
    /// Time between samples.
    pub fn sample_dt(&self) -> f64 {
        self.dt * self.stride as f64
    }
}

/// Observables at one sampled step.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub step: usize,
    pub time: f64,
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    /// Σ_n (Z R_n − ⟨r⟩_n)(e_z·n_n).
    pub dipole_total: f64,
    /// (Z R_n − ⟨r⟩_n)(e_z·n_n).
    pub dipole_local: Vec<f64>,
    /// Δr_n when diagnostics are on.
    pub dr: Option<Vec<f64>>,
    pub ekin_nuclear: f64,
    pub ekin_photon: f64,
    pub energy: EnergyBreakdown,
    pub scf_iterations: usize,
}

/// Column-major store of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub meta: TrajectoryMeta,
    pub step: Vec<usize>,
    pub time: Vec<f64>,
    /// `q[α][t]`.
    pub q: Vec<Vec<f64>>,
    pub p: Vec<Vec<f64>>,
    pub dipole_total: Vec<f64>,
    /// `dipole_local[n][t]`.
    pub dipole_local: Vec<Vec<f64>>,
    /// `dr[n][t]`.
    pub dr: Option<Vec<Vec<f64>>>,
    pub ekin_nuclear: Vec<f64>,
    pub ekin_photon: Vec<f64>,
    pub energy: Vec<EnergyBreakdown>,
    pub scf_iterations: Vec<usize>,
}

impl Trajectory {
    pub fn new(meta: TrajectoryMeta) -> Self {
        let (n, m) = (meta.n_molecules, meta.n_modes);
        let dr = meta.has_polarization.then(|| vec![Vec::new(); n]);
        Self {
            step: Vec::new(),
            time: Vec::new(),
            q: vec![Vec::new(); m],
            p: vec![Vec::new(); m],
            dipole_total: Vec::new(),
            dipole_local: vec![Vec::new(); n],
            dr,
            ekin_nuclear: Vec::new(),
            ekin_photon: Vec::new(),
            energy: Vec::new(),
            scf_iterations: Vec::new(),
            meta,
        }
    }

    pub fn len(&self) -> usize {
        self.step.len()
    }

    pub fn is_empty(&self) -> bool {
        self.step.is_empty()
    }

    pub fn push(&mut self, s: &Sample) -> Result<()> {
        let (n, m) = (self.meta.n_molecules, self.meta.n_modes);
        for (got, expected) in [(s.q.len(), m), (s.p.len(), m), (s.dipole_local.len(), n)] {
            if got != expected {
                return Err(Error::DimensionMismatch { expected, got });
            }
        }
        match (&mut self.dr, &s.dr) {
            (Some(cols), Some(v)) if v.len() == n => cols.iter_mut().zip(v).for_each(|(c, x)| c.push(*x)),
            (None, None) => {}
            _ => return Err(Error::MissingObservable("dr")),
        }
        self.step.push(s.step);
        self.time.push(s.time);
        self.q.iter_mut().zip(&s.q).for_each(|(c, x)| c.push(*x));
        self.p.iter_mut().zip(&s.p).for_each(|(c, x)| c.push(*x));
        self.dipole_total.push(s.dipole_total);
        self.dipole_local
            .iter_mut()
            .zip(&s.dipole_local)
            .for_each(|(c, x)| c.push(*x));
        self.ekin_nuclear.push(s.ekin_nuclear);
        self.ekin_photon.push(s.ekin_photon);
        self.energy.push(s.energy);
        self.scf_iterations.push(s.scf_iterations);
        Ok(())
    }

    /// Conserved energy per sample: the Hartree energy (which already holds
    /// p²/2) plus the nuclear kinetic energy.
    pub fn total_energy(&self) -> Vec<f64> {
        self.energy
            .iter()
            .zip(&self.ekin_nuclear)
            .map(|(e, k)| e.total + k)
            .collect()
    }

    /// Writes the whole trajectory as CSV.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = TrajectoryWriter::new(w, &self.meta)?;
        for t in 0..self.len() {
            out.write(&self.sample(t))?;
        }
        out.finish()?;
        Ok(())
    }

    pub fn sample(&self, t: usize) -> Sample {
        Sample {
            step: self.step[t],
            time: self.time[t],
            q: self.q.iter().map(|c| c[t]).collect(),
            p: self.p.iter().map(|c| c[t]).collect(),
            dipole_total: self.dipole_total[t],
            dipole_local: self.dipole_local.iter().map(|c| c[t]).collect(),
            dr: self.dr.as_ref().map(|d| d.iter().map(|c| c[t]).collect()),
            ekin_nuclear: self.ekin_nuclear[t],
            ekin_photon: self.ekin_photon[t],
            energy: self.energy[t],
            scf_iterations: self.scf_iterations[t],
        }
    }

    /// Reads a trajectory CSV. A trailing error marker is tolerated; the
    /// samples before it are returned.
    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut meta_lines: Vec<(String, String)> = Vec::new();
        let mut header: Option<Vec<String>> = None;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(c) = line.strip_prefix('#') {
                if let Some((k, v)) = c.trim().split_once('=') {
                    if !k.contains(' ') {
                        meta_lines.push((k.to_string(), v.to_string()));
                    }
                }
                continue;
            }
            if header.is_none() {
                header = Some(line.split(',').map(|s| s.trim().to_string()).collect());
                continue;
            }
            let row: std::result::Result<Vec<f64>, _> = line.split(',').map(|s| s.trim().parse::<f64>()).collect();
            let row = row.map_err(|e| Error::TrajectoryFormat(format!("line {}: {e}", i + 1)))?;
            rows.push(row);
        }
        let header = header.ok_or_else(|| Error::TrajectoryFormat("missing header row".into()))?;
        let get = |k: &str| -> Result<&str> {
            meta_lines
                .iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::TrajectoryFormat(format!("missing metadata `{k}`")))
        };
        let parse_err = |k: &str| Error::TrajectoryFormat(format!("bad metadata `{k}`"));
        let n_molecules: usize = get("n_molecules")?.parse().map_err(|_| parse_err("n_molecules"))?;
        let n_modes: usize = get("n_modes")?.parse().map_err(|_| parse_err("n_modes"))?;
        let omega_cavity = get("omega_cavity_mH")?
            .split(';')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>().map(|x| x * 1e-3))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| parse_err("omega_cavity_mH"))?;
        let meta = TrajectoryMeta {
            version: get("version")?.to_string(),
            config_hash: get("config_hash")?.to_string(),
            seed: get("seed")?.parse().map_err(|_| parse_err("seed"))?,
            n_molecules,
            n_modes,
            dt: get("dt_au")?.parse().map_err(|_| parse_err("dt_au"))?,
            stride: get("stride")?.parse().map_err(|_| parse_err("stride"))?,
            omega_cavity,
            has_polarization: get("polarization")?.parse().map_err(|_| parse_err("polarization"))?,
        };
        let expected = column_names(&meta);
        if header != expected {
            return Err(Error::TrajectoryFormat(format!(
                "header does not match metadata: expected {} columns, got {}",
                expected.len(),
                header.len()
            )));
        }
        let mut traj = Trajectory::new(meta);
        let (n, m) = (n_molecules, n_modes);
        for (k, row) in rows.iter().enumerate() {
            if row.len() != expected.len() {
                return Err(Error::TrajectoryFormat(format!(
                    "row {} has {} fields, expected {}",
                    k + 1,
                    row.len(),
                    expected.len()
                )));
            }
            let mut it = row.iter().copied();
            let mut take = |c: usize| -> Vec<f64> { (&mut it).take(c).collect() };
            let head = take(2);
            let q = take(m);
            let p = take(m);
            let scalars = take(10);
            let dipole_local = take(n);
            let dr = traj.meta.has_polarization.then(|| take(n));
            let energy = EnergyBreakdown {
                bare: scalars[3],
                dse_local: scalars[4],
                coupling: scalars[5],
                dipole_dipole: scalars[6],
                photon: scalars[7],
                total: scalars[8],
            };
            traj.push(&Sample {
                step: head[0] as usize,
                time: head[1],
                q,
                p,
                dipole_total: scalars[0],
                dipole_local,
                dr,
                ekin_nuclear: scalars[1],
                ekin_photon: scalars[2],
                energy,
                scf_iterations: scalars[9] as usize,
            })?;
        }
        Ok(traj)
    }
}

fn column_names(meta: &TrajectoryMeta) -> Vec<String> {
    let mut cols = vec!["step".to_string(), "time_au".to_string()];
    cols.extend((0..meta.n_modes).map(|a| format!("q{a}_au")));
    cols.extend((0..meta.n_modes).map(|a| format!("p{a}_au")));
    for c in [
        "dipole_total_au",
        "ekin_nuclear_ha",
        "ekin_photon_ha",
        "e_bare_ha",
        "e_dse_ha",
        "e_coupling_ha",
        "e_dipole_dipole_ha",
        "e_photon_ha",
        "e_total_ha",
        "scf_iterations",
    ] {
        cols.push(c.to_string());
    }
    cols.extend((0..meta.n_molecules).map(|n| format!("dipole{n}_au")));
    if meta.has_polarization {
        cols.extend((0..meta.n_molecules).map(|n| format!("dr{n}_bohr")));
    }
    cols
}

/// Writes a metadata preamble and the header row of an output file.
pub fn write_preamble<W: Write>(w: &mut W, kind: &str, meta: &TrajectoryMeta) -> Result<()> {
    let created = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    writeln!(w, "# cavity-md {kind}")?;
    writeln!(w, "# version={}", meta.version)?;
    writeln!(w, "# config_hash={}", meta.config_hash)?;
    writeln!(w, "# seed={}", meta.seed)?;
    writeln!(w, "# n_molecules={}", meta.n_molecules)?;
    writeln!(w, "# n_modes={}", meta.n_modes)?;
    writeln!(w, "# dt_au={}", meta.dt)?;
    writeln!(w, "# stride={}", meta.stride)?;
    let omegas: Vec<String> = meta.omega_cavity.iter().map(|w| format!("{}", w * 1e3)).collect();
    writeln!(w, "# omega_cavity_mH={}", omegas.join(";"))?;
    writeln!(w, "# polarization={}", meta.has_polarization)?;
    writeln!(w, "# created unix_s {created}")?;
    Ok(())
}

/// Streams samples to CSV as they are produced.
pub struct TrajectoryWriter<W: Write> {
    w: W,
    line: String,
}

impl<W: Write> TrajectoryWriter<W> {
    pub fn new(mut w: W, meta: &TrajectoryMeta) -> Result<Self> {
        write_preamble(&mut w, "trajectory", meta)?;
        writeln!(w, "{}", column_names(meta).join(","))?;
        Ok(Self { w, line: String::new() })
    }

    pub fn write(&mut self, s: &Sample) -> Result<()> {
        use std::fmt::Write as _;
        let l = &mut self.line;
        l.clear();
        let _ = write!(l, "{},{:e}", s.step, s.time);
        for x in s.q.iter().chain(&s.p) {
            let _ = write!(l, ",{x:e}");
        }
        let e = &s.energy;
        for x in [
            s.dipole_total,
            s.ekin_nuclear,
            s.ekin_photon,
            e.bare,
            e.dse_local,
            e.coupling,
            e.dipole_dipole,
            e.photon,
            e.total,
        ] {
            let _ = write!(l, ",{x:e}");
        }
        let _ = write!(l, ",{}", s.scf_iterations);
        for x in s.dipole_local.iter().chain(s.dr.iter().flatten()) {
            let _ = write!(l, ",{x:e}");
        }
        l.push('\n');
        self.w.write_all(l.as_bytes())?;
        Ok(())
    }

    /// Appends the machine-readable failure marker.
    pub fn error_marker(&mut self, err: &Error) -> Result<()> {
        let step = err.step().map_or_else(|| "none".to_string(), |s| s.to_string());
        writeln!(self.w, "# ERROR code={} step={step}", err.code())?;
        self.w.flush()?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.w.flush()?;
        Ok(self.w)
    }
}
