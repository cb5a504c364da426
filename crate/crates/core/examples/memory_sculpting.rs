// Walks the sculpting quantities over two fake tasks: importance, the
// sensitivity-scaled regularization weight, and the unlearning term.

use privcl::linalg::Matrix;
use privcl::sculpt::{
    dynamic_lambda, reg_loss, task_importance, total_loss, unlearn_loss, update_running_importance, ImportanceState,
    SculptConfig,
};

pub fn run_example() -> privcl::Result<()> {
    let config = SculptConfig::default();
    let mut state = ImportanceState::default();

    let first = Matrix::from_rows(&[&[0.2, -0.1, 0.0], &[0.05, 0.3, -0.2]])?;
    let omega = task_importance(&first, 1.4)?;
    update_running_importance(&mut state, omega)?;
    println!("task 1: omega={omega:.4} omega_bar={:.4}", state.omega_bar());

    let second = Matrix::from_rows(&[&[0.25, -0.1, 0.1], &[0.0, 0.35, -0.2]])?;
    for s_bar in [0.1, 0.5, 0.9] {
        let lambda = dynamic_lambda(s_bar, &config)?;
        let reg = reg_loss(&second, &first, lambda, state.omega_bar())?;
        println!("s_bar={s_bar:.1} lambda_dyn={lambda:.2} l_reg={reg:.5}");
    }

    let scores = [0.0, 0.2, 0.7, 0.95];
    let losses = [1.1, 2.3, 4.0, 6.5];
    let unlearn = unlearn_loss(&scores, &losses, config.theta)?;
    let total = total_loss(2.0, 0.01, unlearn, config.lambda_unlearn)?;
    println!("l_unlearn={unlearn:.4} l_total={total:.4}");
    Ok(())
}

#[allow(dead_code)]
fn main() -> privcl::Result<()> {
    run_example()
}
