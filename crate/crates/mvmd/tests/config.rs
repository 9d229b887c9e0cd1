use mvmd::config::{parse, StudyKind};
use mvmd_core::experiments::SweepParam;
use mvmd_core::frozen::Regime;

const MODEL: &str = r#"
[model]
n = 1
m = 1
d1 = 1
d2 = 1
b0 = "-x0 + y0 + 0.25*mu.mean0"
sigma00 = "1"
f0 = "x0 - 2*y0"
g00 = "1"
"#;

fn with(extra: &str) -> String {
    format!("{MODEL}\n{extra}")
}

fn err_path(text: &str) -> String {
    parse(text).unwrap_err().path
}

#[test]
fn minimal_model_parses() {
    let c = parse(MODEL).unwrap();
    assert_eq!(c.model.sources.b, vec!["-x0 + y0 + 0.25*mu.mean0"]);
    assert!(c.grid.is_none() && c.regime.is_none() && c.studies.is_empty());
}

#[test]
fn unknown_keys_report_their_dotted_path() {
    assert_eq!(err_path(&format!("colour = 1\n{MODEL}")), "colour");
    assert_eq!(err_path(&with("colour = 1")), "model.colour");
    assert_eq!(err_path(&MODEL.replace("g00", "tilt = 2\ng00")), "model.tilt");
    assert_eq!(err_path(&with("[grid]\nhorizon = 1\ndt = 0.01\nsteps = 3")), "grid.steps");
    let s = with(
        "[regime]\ndelta = 0.1\nepsilon = 0.01\n[sweep.a]\nparameter = \"delta\"\nstart = 0.1\nfactor = 0.5\ncount = 3\n\
         [study.s]\nkind = \"averaging\"\nsweep = \"a\"\nwobble = true",
    );
    assert_eq!(err_path(&s), "study.s.wobble");
}

#[test]
fn missing_and_mistyped_keys() {
    assert_eq!(err_path(&MODEL.replace("f0 = \"x0 - 2*y0\"", "")), "model.f0");
    assert_eq!(err_path(&with("[grid]\nhorizon = \"long\"\ndt = 0.1")), "grid.horizon");
    assert_eq!(err_path("seed = 1"), "model");
}

#[test]
fn matrix_keys_accept_both_spellings() {
    let c = parse(&MODEL.replace("sigma00", "sigma0_0")).unwrap();
    assert_eq!(c.model.sources.sigma, vec!["1"]);
}

#[test]
fn regime_defaults() {
    let c = parse(&with("[regime]\nregime = 2\ngamma = 0.5\ndelta = 0.02")).unwrap();
    let r = c.regime.unwrap();
    assert_eq!(r.regime, Regime::Two { gamma: 0.5 });
    assert!((r.epsilon - 0.01).abs() < 1e-15);
    assert_eq!((r.particles, r.x0.clone(), r.y0.clone()), (128, vec![0.0], vec![0.0]));
    assert_eq!(err_path(&with("[regime]\ndelta = 0.1")), "regime.epsilon");
    assert_eq!(err_path(&with("[regime]\ngamma = 1\ndelta = 0.1\nepsilon = 0.1")), "regime.gamma");
    assert_eq!(err_path(&with("[regime]\ndelta = 0.1\nepsilon = 0.1\nx0 = [1, 2]")), "regime.x0");
}

#[test]
fn studies_reference_matching_sweeps() {
    let sweeps = "[sweep.d]\nparameter = \"delta\"\nstart = 0.1\nfactor = 0.5\ncount = 3\nreplicas = 8\n\
                  [sweep.w]\nparameter = \"window\"\nstart = 0.1\nfactor = 0.5\ncount = 3\n";
    let c = parse(&with(&format!("{sweeps}[study.a]\nkind = \"averaging\"\nsweep = \"d\"\ntolerance = 0.2"))).unwrap();
    assert_eq!(c.sweeps.len(), 2);
    assert_eq!(c.sweep("d").unwrap().parameter, SweepParam::Delta);
    assert_eq!(c.sweep("d").unwrap().replicas, 8);
    match &c.studies[0].kind {
        StudyKind::Averaging { tolerance, slope, .. } => assert_eq!((*slope, *tolerance), (1.0, 0.2)),
        k => panic!("parsed as {k:?}"),
    }
    let wrong = with(&format!("{sweeps}[study.r]\nkind = \"regularity\"\nsweep = \"d\""));
    assert_eq!(err_path(&wrong), "study.r.sweep");
    let dangling = with(&format!("{sweeps}[study.a]\nkind = \"averaging\"\nsweep = \"nope\""));
    assert_eq!(err_path(&dangling), "study.a.sweep");
    let unsweeped = with(&format!("{sweeps}[study.a]\nkind = \"averaging\""));
    assert_eq!(err_path(&unsweeped), "study.a.sweep");
    assert_eq!(err_path(&with(&format!("{sweeps}[study.a]\nkind = \"magic\"\nsweep = \"d\""))), "study.a.kind");
}

#[test]
fn sweep_schedules_are_checked() {
    let bad = with("[sweep.d]\nparameter = \"delta\"\nstart = 0.1\nfactor = 1.0\ncount = 3");
    assert_eq!(err_path(&bad), "sweep.d");
    let bad = with("[sweep.d]\nparameter = \"speed\"\nstart = 0.1\nfactor = 0.5\ncount = 3");
    assert_eq!(err_path(&bad), "sweep.d.parameter");
}

#[test]
fn mdp_keys() {
    let s = with(
        "[sweep.d]\nparameter = \"delta\"\nstart = 0.1\nfactor = 0.1\ncount = 3\n\
         [study.p]\nkind = \"mdp\"\nsweep = \"d\"\nradius = 1\nsystems = 10\nq = 1\na = -0.5\ninterval = [0.55, 1.05]",
    );
    match &parse(&s).unwrap().studies[0].kind {
        StudyKind::Mdp {
            analytic_q,
            interval,
            require_decreasing,
            epsilon_ratio,
            ..
        } => {
            assert_eq!(analytic_q.as_deref(), Some(&[1.0][..]));
            assert_eq!(*interval, Some((0.55, 1.05)));
            assert!(*require_decreasing);
            assert_eq!(*epsilon_ratio, 0.1);
        }
        k => panic!("parsed as {k:?}"),
    }
}
