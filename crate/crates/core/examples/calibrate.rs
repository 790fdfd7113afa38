//! Prints the calibrated DGP coefficients for both age encodings.

use triplediff::simlab::{calibrate, AgeForm, Dgp, DgpSpec};

fn main() -> triplediff::Result<()> {
    for form in [AgeForm::Quadratic, AgeForm::Bins] {
        let c = calibrate(form)?;
        println!("{form:?}");
        for (a, v) in c.alpha.iter().enumerate() {
            println!("  alpha[{a}] = {v:?}");
        }
        println!("  beta0 = {:?}\n  beta = {:?}\n  sigma_u = {:?}", c.beta0, c.beta, c.sigma_u);
        let dgp = Dgp::new(&DgpSpec::calibrated(form)?)?;
        println!("  cell shares = {:?}", dgp.cell_shares());
        println!("  DATT truth = {:.6}, sd(beta x) = {:.6}", dgp.truth_datt, dgp.sd_linear);
    }
    Ok(())
}
