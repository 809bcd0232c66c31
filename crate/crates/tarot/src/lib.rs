//! TAROT: adversarially robust unsupervised domain adaptation on desk-scale
//! problems, with exact finite-instance checks of the generalization bounds
//! that motivate the objective.
//!
//! The crate has three layers:
//!
//! * data and models — labeled/unlabeled datasets ([`data`]), synthetic shift
//!   generators and enumerable finite worlds ([`synth`]), a small fixed
//!   architecture with hand-written gradients ([`model`]), and the scoring
//!   traits that tie them together ([`scorer`]);
//! * the objective — margin losses ([`loss`]), projected-gradient and exact
//!   ball attacks ([`attack`]), disparity measures and the adversarial head
//!   term ([`disparity`]), the training loops ([`train`]), and the evaluation
//!   harness ([`eval`]);
//! * verification — exact brute-force checks of the bound inequalities on
//!   finite instances ([`theory`]), plus experiment orchestration ([`exp`])
//!   and plotting ([`plot`]) used by the command-line tool.

pub mod attack;
pub mod data;
pub mod disparity;
pub mod error;
pub mod eval;
pub mod exp;
pub mod loss;
pub mod model;
pub mod plot;
pub mod scorer;
pub mod synth;
pub mod theory;
pub mod train;

pub use attack::{fgsm, pgd, pgd_batch, AttackResult, BoxBounds, Norm, PerturbationBudget};
pub use data::{DomainDataset, DomainTag};
pub use disparity::{
    adversarial_block, disparity_report, disparity_report_exact, grl_coefficient,
    plain_discrepancy_exact, robust_discrepancy_exact, AdversarialBlock, DiscrepancyReport,
    DisparityReport,
};
pub use error::{Error, Result};
pub use eval::{
    evaluate, local_lipschitz_estimate, pgd20, robust_accuracy, robust_accuracy_exact,
    robust_accuracy_on_world, select_checkpoint, standard_accuracy, EvalReport,
    LipschitzEstimate, LipschitzSearch, SelectionPolicy,
};
pub use exp::{
    apply_sweep_value, config_hash, default_config, emit_plots, median, parse_attack_spec,
    parse_dataset_spec, realize_domain, resolve_out_root, run_config, run_experiment, sweep,
    train_teacher, ExperimentConfig, GeneratorSpec, Method, RunManifest, SweepIndex,
    SweepOutcome, SweepParam,
};
pub use loss::{
    ce_loss, ce_rob_loss, margin, margin_risk, mod_ce_rob_loss, phi_rho, robust_margin_risk,
    BallMaximizer, CeLoss, NegMarginLoss,
};
pub use model::{Head, HeadView, MlpDims, MlpScorer, ModelCheckpoint, Trace};
pub use plot::{render_line_plot, series_csv, write_line_plot, Series};
pub use scorer::{
    predict_class, predict_from_logits, softmax_scores, DiffScorer, LinearScorer, LogitTable,
    MarginConfig, ScalarLoss, Scorer,
};
pub use synth::{make_finite_world, make_two_moons_shift, FiniteWorld, ShiftSpec};
pub use theory::{
    empirical_rademacher, local_lipschitz_exact, random_instance, run_suite,
    verify_disp_risk_lemma, verify_prop1, verify_prop2, verify_prop3, InequalityReport,
    InstanceSizes, SuiteFailure, SuiteReport, TheoryInstance,
};
pub use train::{
    pretrain_robust, tarot_objective_grad, tarot_step, tarot_total, train_pl,
    train_standard_at, train_tarot, train_teacher_mdd, train_teacher_mdd_state, EpochSnapshot,
    MetricsRecord, StepLosses, TarotConfig, TrainState,
};
