use gammaz::fields::builtin;
use gammaz::tensor::{assemble, Mode};
use nalgebra::DMatrix;
use std::collections::BTreeMap;

fn spectral(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .cloned()
        .fold(0.0f64, f64::max)
}

#[test]
fn probe_lexicographic_replay() {
    let s = builtin("heisenberg", &BTreeMap::new()).unwrap();
    let x = [0.6260819835558555, 0.04815502543580785, 0.9899278565436949];
    let d = 3usize;
    let d2 = d * d;
    let ap = assemble(&s, &x).unwrap();
    let lam = ap.solve_lambda(Mode::ZPlain);
    println!("reported residual: {:.3e}", lam.residual);

    let mut t = DMatrix::<f64>::zeros(d2, 2 * d2);
    t.view_mut((0, 0), (d2, d2)).copy_from(&(ap.q.transpose() * &ap.q));
    t.view_mut((0, d2), (d2, d2)).copy_from(&(ap.p.transpose() * &ap.p));
    let mut rhs = ap.c.coeff().clone();
    rhs += ap.q.transpose() * ap.dvec.coeff();
    rhs += ap.f.coeff();
    rhs += ap.p.transpose() * ap.evec.coeff();

    // Check the returned solution against the system directly.
    let mut sol = DMatrix::<f64>::zeros(2 * d2, d);
    sol.view_mut((0, 0), (d2, d)).copy_from(lam.lambda1.coeff());
    sol.view_mut((d2, 0), (d2, d))
        .copy_from(lam.lambda2.as_ref().unwrap().coeff());
    let defect = &t * &sol - &rhs;
    println!("|sol| {:.3e}  full defect {:.3e}", sol.norm(), defect.norm());
    let mut symd = DMatrix::<f64>::zeros(d2, d);
    for i in 0..d {
        for j in 0..d {
            for r in 0..d {
                symd[(i * d + j, r)] = (defect[(i * d + j, r)] + defect[(j * d + i, r)]) * 0.5;
            }
        }
    }
    println!("sym defect spectral: {:.3e}", spectral(&symd));

    // Replay the two-stage solve.
    let nv = 2 * d2;
    let nsym = d * (d + 1) / 2;
    let c = std::f64::consts::FRAC_1_SQRT_2;
    let mut so = DMatrix::<f64>::zeros(nsym, d2);
    let mut row = 0;
    for i in 0..d {
        for j in i..d {
            if i == j {
                so[(row, i * d + i)] = 1.0;
            } else {
                so[(row, i * d + j)] = c;
                so[(row, j * d + i)] = c;
            }
            row += 1;
        }
    }
    let mut a1 = DMatrix::<f64>::zeros(nsym.max(nv), nv);
    a1.view_mut((0, 0), (nsym, nv)).copy_from(&(&so * &t));
    let mut b1 = DMatrix::<f64>::zeros(nsym.max(nv), d);
    b1.view_mut((0, 0), (nsym, d)).copy_from(&(&so * &rhs));
    let svd1 = a1.clone().svd(true, true);
    let smax1 = svd1.singular_values.iter().cloned().fold(0.0f64, f64::max);
    let eps1 = 1e-10 * smax1;
    let sol1 = svd1.solve(&b1, eps1).unwrap();
    println!(
        "stage1: |sol1| {:.3e}  sym resid {:.3e}  full resid {:.3e}",
        sol1.norm(),
        (&a1 * &sol1 - &b1).norm(),
        (&t * &sol1 - &rhs).norm()
    );

    let vt = svd1.v_t.as_ref().unwrap();
    println!(
        "stage1 svd: {} singular values, v_t is {}x{}",
        svd1.singular_values.len(),
        vt.nrows(),
        vt.ncols()
    );
    let null_rows: Vec<usize> = (0..svd1.singular_values.len())
        .filter(|&j| svd1.singular_values[j] <= eps1)
        .collect();
    println!("null directions: {}", null_rows.len());
    let mut vmat = DMatrix::<f64>::zeros(nv, null_rows.len());
    for (col, &j) in null_rows.iter().enumerate() {
        vmat.set_column(col, &vt.row(j).transpose());
    }
    let a2 = &t * &vmat;
    let b2 = &rhs - &t * &sol1;
    let svd2 = a2.clone().svd(true, true);
    let smax2 = svd2.singular_values.iter().cloned().fold(0.0f64, f64::max);
    let eps2 = 1e-10 * smax2;
    let corr = svd2.solve(&b2, eps2).unwrap();
    let stage2_resid = spectral(&(&a2 * &corr - &b2));
    let scale = 1.0 + spectral(&rhs) + spectral(&(&t * &sol1));
    println!(
        "stage2: |corr| {:.3e}  resid {:.3e}  accept threshold {:.3e}  closed {}",
        corr.norm(),
        stage2_resid,
        1e-10 * scale,
        stage2_resid <= 1e-10 * scale
    );
    let refined = &sol1 + &vmat * &corr;
    let rdef = &t * &refined - &rhs;
    let mut rsym = DMatrix::<f64>::zeros(d2, d);
    for i in 0..d {
        for j in 0..d {
            for r in 0..d {
                rsym[(i * d + j, r)] = (rdef[(i * d + j, r)] + rdef[(j * d + i, r)]) * 0.5;
            }
        }
    }
    println!(
        "refined: |sol| {:.3e}  full defect {:.3e}  sym defect {:.3e}",
        refined.norm(),
        rdef.norm(),
        spectral(&rsym)
    );
}

#[test]
fn probe_svd_padding_accuracy() {
    let s = builtin("heisenberg", &BTreeMap::new()).unwrap();
    let x = [0.6260819835558555, 0.04815502543580785, 0.9899278565436949];
    let d = 3usize;
    let d2 = d * d;
    let ap = assemble(&s, &x).unwrap();
    let mut t = DMatrix::<f64>::zeros(d2, 2 * d2);
    t.view_mut((0, 0), (d2, d2)).copy_from(&(ap.q.transpose() * &ap.q));
    t.view_mut((0, d2), (d2, d2)).copy_from(&(ap.p.transpose() * &ap.p));
    let nsym = d * (d + 1) / 2;
    let c = std::f64::consts::FRAC_1_SQRT_2;
    let mut so = DMatrix::<f64>::zeros(nsym, d2);
    let mut row = 0;
    for i in 0..d {
        for j in i..d {
            if i == j {
                so[(row, i * d + i)] = 1.0;
            } else {
                so[(row, i * d + j)] = c;
                so[(row, j * d + i)] = c;
            }
            row += 1;
        }
    }
    let nv = 2 * d2;
    let sot = &so * &t;
    let mut a1 = DMatrix::<f64>::zeros(nsym.max(nv), nv);
    a1.view_mut((0, 0), (nsym, nv)).copy_from(&sot);

    let svd_pad = a1.clone().svd(true, true);
    let up = svd_pad.u.as_ref().unwrap();
    let vtp = svd_pad.v_t.as_ref().unwrap();
    let mut sig = DMatrix::<f64>::zeros(up.ncols(), vtp.nrows());
    for j in 0..svd_pad.singular_values.len() {
        sig[(j, j)] = svd_pad.singular_values[j];
    }
    let recon = up * &sig * vtp;
    println!("padded 18x18 svd reconstruction error: {:.3e}", (&recon - &a1).norm());
    println!("padded u orthogonality: {:.3e}", (up.transpose() * up - DMatrix::<f64>::identity(up.ncols(), up.ncols())).norm());
    println!("padded v orthogonality: {:.3e}", (vtp * vtp.transpose() - DMatrix::<f64>::identity(vtp.nrows(), vtp.nrows())).norm());
    let mut sv: Vec<f64> = svd_pad.singular_values.iter().cloned().collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
    println!("padded top 7 sv: {:?}", &sv[..7]);

    let svd_flat = sot.clone().svd(true, true);
    let uf = svd_flat.u.as_ref().unwrap();
    let vtf = svd_flat.v_t.as_ref().unwrap();
    let mut sigf = DMatrix::<f64>::zeros(uf.ncols(), vtf.nrows());
    for j in 0..svd_flat.singular_values.len() {
        sigf[(j, j)] = svd_flat.singular_values[j];
    }
    let reconf = uf * &sigf * vtf;
    println!("flat 6x18 svd reconstruction error: {:.3e}", (&reconf - &sot).norm());
    let mut svf: Vec<f64> = svd_flat.singular_values.iter().cloned().collect();
    svf.sort_by(|a, b| b.partial_cmp(a).unwrap());
    println!("flat sv: {:?}", svf);
}

#[test]
fn probe_zplain_conditioning() {
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};
    let s = builtin("heisenberg", &BTreeMap::new()).unwrap();
    let mut rng = StdRng::seed_from_u64(20260818);
    let mut bad = 0usize;
    let mut worst = 0.0f64;
    let mut worst_x = vec![0.0; 3];
    for _ in 0..4000 {
        let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let ap = assemble(&s, &x).unwrap();
        let r = ap.solve_lambda(Mode::ZPlain).residual;
        if r > 1e-8 {
            bad += 1;
        }
        if r > worst {
            worst = r;
            worst_x = x.clone();
        }
    }
    println!("bad: {bad}/4000, worst {worst:.3e} at {worst_x:?}");
}

#[test]
fn probe_new_worst() {
    let s = builtin("heisenberg", &BTreeMap::new()).unwrap();
    let x = [-0.3132250245256234, -0.6064104958308825, -1.1644525172667226];
    let d = 3usize;
    let d2 = d * d;
    let ap = assemble(&s, &x).unwrap();
    println!("reported: {:.3e}", ap.solve_lambda(Mode::ZPlain).residual);
    let mut t = DMatrix::<f64>::zeros(d2, 2 * d2);
    t.view_mut((0, 0), (d2, d2)).copy_from(&(ap.q.transpose() * &ap.q));
    t.view_mut((0, d2), (d2, d2)).copy_from(&(ap.p.transpose() * &ap.p));
    let mut rhs = ap.c.coeff().clone();
    rhs += ap.q.transpose() * ap.dvec.coeff();
    rhs += ap.f.coeff();
    rhs += ap.p.transpose() * ap.evec.coeff();
    let nsym = 6;
    let c = std::f64::consts::FRAC_1_SQRT_2;
    let mut so = DMatrix::<f64>::zeros(nsym, d2);
    let mut row = 0;
    for i in 0..d {
        for j in i..d {
            if i == j {
                so[(row, i * d + i)] = 1.0;
            } else {
                so[(row, i * d + j)] = c;
                so[(row, j * d + i)] = c;
            }
            row += 1;
        }
    }
    let a1 = &so * &t;
    let b1 = &so * &rhs;
    let svd = a1.clone().svd(true, true);
    let mut sv: Vec<f64> = svd.singular_values.iter().cloned().collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
    println!("flat sv: {:?}", sv);
    for cut in [1e-8, 1e-10, 1e-12, 1e-14, 1e-16] {
        let sol = svd.solve(&b1, cut).unwrap();
        println!(
            "cutoff {:.0e}: |sol| {:.3e}  sym resid {:.3e}",
            cut,
            sol.norm(),
            (&a1 * &sol - &b1).norm()
        );
    }
    // Independent check via normal equations with pivoted QR on a1^T (col-pivoted householder).
    let qr = a1.transpose().col_piv_qr();
    let rmat = qr.r();
    let diag: Vec<f64> = (0..rmat.nrows().min(rmat.ncols())).map(|i| rmat[(i, i)].abs()).collect();
    println!("colpiv qr |r diag|: {:?}", diag);
}

fn eig_minnorm(a: &DMatrix<f64>, b: &DMatrix<f64>, relcut: f64) -> DMatrix<f64> {
    let g = a * a.transpose();
    let se = g.clone().symmetric_eigen();
    let lmax = se.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let mut y = DMatrix::<f64>::zeros(a.nrows(), b.ncols());
    if lmax == 0.0 {
        return DMatrix::zeros(a.ncols(), b.ncols());
    }
    for j in 0..se.eigenvalues.len() {
        let l = se.eigenvalues[j];
        if l > relcut * lmax {
            let uj = se.eigenvectors.column(j);
            let coef = uj.transpose() * b / l;
            y += uj * coef;
        }
    }
    a.transpose() * y
}

#[test]
fn probe_eigen_solver() {
    let s = builtin("heisenberg", &BTreeMap::new()).unwrap();
    for x in [
        [0.6260819835558555, 0.04815502543580785, 0.9899278565436949],
        [-0.3132250245256234, -0.6064104958308825, -1.1644525172667226],
    ] {
        let d = 3usize;
        let d2 = 9;
        let ap = assemble(&s, &x).unwrap();
        let mut t = DMatrix::<f64>::zeros(d2, 2 * d2);
        t.view_mut((0, 0), (d2, d2)).copy_from(&(ap.q.transpose() * &ap.q));
        t.view_mut((0, d2), (d2, d2)).copy_from(&(ap.p.transpose() * &ap.p));
        let mut rhs = ap.c.coeff().clone();
        rhs += ap.q.transpose() * ap.dvec.coeff();
        rhs += ap.f.coeff();
        rhs += ap.p.transpose() * ap.evec.coeff();
        let nsym = 6;
        let c = std::f64::consts::FRAC_1_SQRT_2;
        let mut so = DMatrix::<f64>::zeros(nsym, d2);
        let mut row = 0;
        for i in 0..d {
            for j in i..d {
                if i == j {
                    so[(row, i * d + i)] = 1.0;
                } else {
                    so[(row, i * d + j)] = c;
                    so[(row, j * d + i)] = c;
                }
                row += 1;
            }
        }
        let a1 = &so * &t;
        let b1 = &so * &rhs;
        let sol = eig_minnorm(&a1, &b1, 1e-12);
        println!(
            "point {:?}: |sol| {:.3e}  sym resid {:.3e}",
            x,
            sol.norm(),
            (&a1 * &sol - &b1).norm()
        );
    }
}
