//! Explicit Dormand–Prince 8(5,3) integrator for autonomous systems.
//!
//! Step control follows the classic DOP853 scheme: a fifth-order and a
//! third-order error estimate are combined, and the step factor is clamped
//! to [1/6, 3] with safety factor 0.9.

use crate::error::{GeoError, Result};

#[derive(Debug, Clone, Copy)]
pub struct OdeOptions {
    pub rtol: f64,
    pub atol: f64,
    /// Upper bound on the step size; keeps accepted nodes dense enough for
    /// Hermite interpolation.
    pub max_step: f64,
    pub max_steps: usize,
}

impl OdeOptions {
    pub fn with_tol(tol: f64) -> Self {
        OdeOptions { rtol: tol, atol: tol, max_step: f64::INFINITY, max_steps: 10_000_000 }
    }

    pub fn max_step(mut self, h: f64) -> Self {
        self.max_step = h;
        self
    }
}

const A21: f64 = 5.26001519587677318785587544488E-2;
const A31: f64 = 1.97250569845378994544595329183E-2;
const A32: f64 = 5.91751709536136983633785987549E-2;
const A41: f64 = 2.95875854768068491816892993775E-2;
const A43: f64 = 8.87627564304205475450678981324E-2;
const A51: f64 = 2.41365134159266685502369798665E-1;
const A53: f64 = -8.84549479328286085344864962717E-1;
const A54: f64 = 9.24834003261792003115737966543E-1;
const A61: f64 = 3.7037037037037037037037037037E-2;
const A64: f64 = 1.70828608729473871279604482173E-1;
const A65: f64 = 1.25467687566822425016691814123E-1;
const A71: f64 = 3.7109375E-2;
const A74: f64 = 1.70252211019544039314978060272E-1;
const A75: f64 = 6.02165389804559606850219397283E-2;
const A76: f64 = -1.7578125E-2;
const A81: f64 = 3.70920001185047927108779319836E-2;
const A84: f64 = 1.70383925712239993810214054705E-1;
const A85: f64 = 1.07262030446373284651809199168E-1;
const A86: f64 = -1.53194377486244017527936158236E-2;
const A87: f64 = 8.27378916381402288758473766002E-3;
const A91: f64 = 6.24110958716075717114429577812E-1;
const A94: f64 = -3.36089262944694129406857109825E0;
const A95: f64 = -8.68219346841726006818189891453E-1;
const A96: f64 = 2.75920996994467083049415600797E1;
const A97: f64 = 2.01540675504778934086186788979E1;
const A98: f64 = -4.34898841810699588477366255144E1;
const A101: f64 = 4.77662536438264365890433908527E-1;
const A104: f64 = -2.48811461997166764192642586468E0;
const A105: f64 = -5.90290826836842996371446475743E-1;
const A106: f64 = 2.12300514481811942347288949897E1;
const A107: f64 = 1.52792336328824235832596922938E1;
const A108: f64 = -3.32882109689848629194453265587E1;
const A109: f64 = -2.03312017085086261358222928593E-2;
const A111: f64 = -9.3714243008598732571704021658E-1;
const A114: f64 = 5.18637242884406370830023853209E0;
const A115: f64 = 1.09143734899672957818500254654E0;
const A116: f64 = -8.14978701074692612513997267357E0;
const A117: f64 = -1.85200656599969598641566180701E1;
const A118: f64 = 2.27394870993505042818970056734E1;
const A119: f64 = 2.49360555267965238987089396762E0;
const A1110: f64 = -3.0467644718982195003823669022E0;
const A121: f64 = 2.27331014751653820792359768449E0;
const A124: f64 = -1.05344954667372501984066689879E1;
const A125: f64 = -2.00087205822486249909675718444E0;
const A126: f64 = -1.79589318631187989172765950534E1;
const A127: f64 = 2.79488845294199600508499808837E1;
const A128: f64 = -2.85899827713502369474065508674E0;
const A129: f64 = -8.87285693353062954433549289258E0;
const A1210: f64 = 1.23605671757943030647266201528E1;
const A1211: f64 = 6.43392746015763530355970484046E-1;
const B1: f64 = 5.42937341165687622380535766363E-2;
const B6: f64 = 4.45031289275240888144113950566E0;
const B7: f64 = 1.89151789931450038304281599044E0;
const B8: f64 = -5.8012039600105847814672114227E0;
const B9: f64 = 3.1116436695781989440891606237E-1;
const B10: f64 = -1.52160949662516078556178806805E-1;
const B11: f64 = 2.01365400804030348374776537501E-1;
const B12: f64 = 4.47106157277725905176885569043E-2;
const BHH1: f64 = 0.244094488188976377952755905512E+00;
const BHH2: f64 = 0.733846688281611857341361741547E+00;
const BHH3: f64 = 0.220588235294117647058823529412E-01;
const ER1: f64 = 0.1312004499419488073250102996E-01;
const ER6: f64 = -0.1225156446376204440720569753E+01;
const ER7: f64 = -0.4957589496572501915214079952E+00;
const ER8: f64 = 0.1664377182454986536961530415E+01;
const ER9: f64 = -0.3503288487499736816886487290E+00;
const ER10: f64 = 0.3341791187130174790297318841E+00;
const ER11: f64 = 0.8192320648511571246570742613E-01;
const ER12: f64 = -0.2235530786388629525884427845E-01;

const SAFE: f64 = 0.9;
const FAC_MIN: f64 = 1.0 / 6.0;
const FAC_MAX: f64 = 1.0 / 0.333;

/// Integrate `y' = rhs(y)` from `t0` to `t_end > t0`.
///
/// `observer(t, y, y')` is invoked at the initial point and after every
/// accepted step; the last call is at exactly `t_end`. Returns the final
/// state.
pub fn integrate<F, O>(
    mut rhs: F,
    t0: f64,
    y0: &[f64],
    t_end: f64,
    opts: &OdeOptions,
    mut observer: O,
) -> Result<Vec<f64>>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<()>,
    O: FnMut(f64, &[f64], &[f64]) -> Result<()>,
{
    let n = y0.len();
    if !(t_end > t0) {
        return Err(GeoError::InvalidInput(format!("integration span [{t0}, {t_end}] is empty")));
    }
    let mut y = y0.to_vec();
    let mut k1 = vec![0.0; n];
    rhs(&y, &mut k1)?;
    check_finite(&k1, t0)?;
    observer(t0, &y, &k1)?;

    let mut k = vec![vec![0.0; n]; 12];
    let mut ytmp = vec![0.0; n];
    let mut y1 = vec![0.0; n];
    let mut knew = vec![0.0; n];

    let span = t_end - t0;
    let mut h = initial_step(&mut rhs, &y, &k1, span, opts)?;
    let mut t = t0;
    let mut steps = 0usize;
    let mut last_rejected = false;

    loop {
        if steps >= opts.max_steps {
            return Err(GeoError::StepBudget { t, max_steps: opts.max_steps });
        }
        let mut last = false;
        if t + h >= t_end || t + 1.01 * h >= t_end {
            h = t_end - t;
            last = true;
        }
        if h.abs() <= 1e-14 * t.abs().max(1.0) {
            return Err(GeoError::StepUnderflow { t, h });
        }
        steps += 1;

        let stage = |coef: &[(usize, f64)], y: &[f64], k: &[Vec<f64>], out: &mut [f64]| {
            for i in 0..n {
                let mut s = 0.0;
                for &(j, a) in coef {
                    s += a * if j == 0 { k1[i] } else { k[j][i] };
                }
                out[i] = y[i] + h * s;
            }
        };
        // k[j] holds stage j+1 for j >= 1 (k[0] unused, k1 kept separately).
        stage(&[(0, A21)], &y, &k, &mut ytmp);
        rhs(&ytmp, &mut k[1])?;
        stage(&[(0, A31), (1, A32)], &y, &k, &mut ytmp);
        rhs(&ytmp, &mut k[2])?;
        stage(&[(0, A41), (2, A43)], &y, &k, &mut ytmp);
        rhs(&ytmp, &mut k[3])?;
        stage(&[(0, A51), (2, A53), (3, A54)], &y, &k, &mut ytmp);
        rhs(&ytmp, &mut k[4])?;
        stage(&[(0, A61), (3, A64), (4, A65)], &y, &k, &mut ytmp);
        rhs(&ytmp, &mut k[5])?;
        stage(&[(0, A71), (3, A74), (4, A75), (5, A76)], &y, &k, &mut ytmp);
        rhs(&ytmp, &mut k[6])?;
        stage(&[(0, A81), (3, A84), (4, A85), (5, A86), (6, A87)], &y, &k, &mut ytmp);
        rhs(&ytmp, &mut k[7])?;
        stage(&[(0, A91), (3, A94), (4, A95), (5, A96), (6, A97), (7, A98)], &y, &k, &mut ytmp);
        rhs(&ytmp, &mut k[8])?;
        stage(
            &[(0, A101), (3, A104), (4, A105), (5, A106), (6, A107), (7, A108), (8, A109)],
            &y,
            &k,
            &mut ytmp,
        );
        rhs(&ytmp, &mut k[9])?;
        stage(
            &[(0, A111), (3, A114), (4, A115), (5, A116), (6, A117), (7, A118), (8, A119), (9, A1110)],
            &y,
            &k,
            &mut ytmp,
        );
        rhs(&ytmp, &mut k[10])?;
        stage(
            &[
                (0, A121),
                (3, A124),
                (4, A125),
                (5, A126),
                (6, A127),
                (7, A128),
                (8, A129),
                (9, A1210),
                (10, A1211),
            ],
            &y,
            &k,
            &mut ytmp,
        );
        rhs(&ytmp, &mut k[11])?;

        let mut err = 0.0;
        let mut err2 = 0.0;
        for i in 0..n {
            let incr = B1 * k1[i]
                + B6 * k[5][i]
                + B7 * k[6][i]
                + B8 * k[7][i]
                + B9 * k[8][i]
                + B10 * k[9][i]
                + B11 * k[10][i]
                + B12 * k[11][i];
            y1[i] = y[i] + h * incr;
            let sk = opts.atol + opts.rtol * y[i].abs().max(y1[i].abs());
            let e2 = incr - BHH1 * k1[i] - BHH2 * k[8][i] - BHH3 * k[11][i];
            err2 += (e2 / sk).powi(2);
            let e = ER1 * k1[i]
                + ER6 * k[5][i]
                + ER7 * k[6][i]
                + ER8 * k[7][i]
                + ER9 * k[8][i]
                + ER10 * k[9][i]
                + ER11 * k[10][i]
                + ER12 * k[11][i];
            err += (e / sk).powi(2);
        }
        let mut deno = err + 0.01 * err2;
        if deno <= 0.0 {
            deno = 1.0;
        }
        let err = h.abs() * err * (1.0 / (deno * n as f64)).sqrt();
        if !err.is_finite() || y1.iter().any(|v| !v.is_finite()) {
            h *= 0.25;
            last_rejected = true;
            continue;
        }
        let fac11 = err.powf(0.125);
        let fac = (fac11 / SAFE).clamp(1.0 / FAC_MAX, 1.0 / FAC_MIN);
        let mut h_new = (h / fac).min(opts.max_step);

        if err <= 1.0 {
            rhs(&y1, &mut knew)?;
            check_finite(&knew, t + h)?;
            t = if last { t_end } else { t + h };
            std::mem::swap(&mut y, &mut y1);
            std::mem::swap(&mut k1, &mut knew);
            observer(t, &y, &k1)?;
            if last {
                return Ok(y);
            }
            if last_rejected {
                h_new = h_new.min(h);
            }
            last_rejected = false;
            h = h_new;
        } else {
            h /= (fac11 / SAFE).min(FAC_MAX);
            last_rejected = true;
        }
    }
}

fn check_finite(v: &[f64], t: f64) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(GeoError::NonFinite { t })
    }
}

fn initial_step<F>(rhs: &mut F, y: &[f64], f0: &[f64], span: f64, opts: &OdeOptions) -> Result<f64>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<()>,
{
    let n = y.len() as f64;
    let sk: Vec<f64> = y.iter().map(|v| opts.atol + opts.rtol * v.abs()).collect();
    let dnf = f0.iter().zip(&sk).map(|(f, s)| (f / s).powi(2)).sum::<f64>() / n;
    let dny = y.iter().zip(&sk).map(|(v, s)| (v / s).powi(2)).sum::<f64>() / n;
    let mut h = if dnf <= 1e-10 || dny <= 1e-10 { 1e-6 } else { 0.01 * (dny / dnf).sqrt() };
    h = h.min(opts.max_step).min(span);
    let y1: Vec<f64> = y.iter().zip(f0).map(|(v, f)| v + h * f).collect();
    let mut f1 = vec![0.0; y.len()];
    rhs(&y1, &mut f1)?;
    let der2 = (f1
        .iter()
        .zip(f0)
        .zip(&sk)
        .map(|((a, b), s)| ((a - b) / s).powi(2))
        .sum::<f64>()
        / n)
        .sqrt()
        / h;
    let der12 = der2.max(dnf.sqrt());
    let h1 = if der12 <= 1e-15 { (1e-6f64).max(h * 1e-3) } else { (0.01 / der12).powf(1.0 / 8.0) };
    Ok((100.0 * h).min(h1).min(opts.max_step).min(span))
}
