use permtrack::flow::{generate_snapshots, FlowParams};
use permtrack::learning::{run_sweep, Method, SweepConfig, SweepParam, SweepSpec};

fn main() {
    let params = FlowParams::new(1.0, 0.0);
    let (mut in_band_sp4, mut in_band_bp) = (0, 0);
    let trials = 30u64;
    let mut lns = Vec::new();
    for seed in 0..trials {
        let snap = generate_snapshots(100, &params, 1.0, 100 + seed).unwrap();
        let spec = SweepSpec {
            parameter: SweepParam::Kappa,
            grid: SweepSpec::default_kappa_grid(),
            fixed: 0.0,
            methods: vec![Method::Bp, Method::BpSp4],
        };
        let res = run_sweep(&snap, &spec, &SweepConfig::default()).unwrap();
        let find = |m: Method| res.argmax.iter().find(|a| a.method == m).unwrap().refined;
        let sp4 = find(Method::BpSp4);
        let bp = find(Method::Bp);
        if (0.7..=1.4).contains(&sp4) { in_band_sp4 += 1; }
        if (0.7..=1.4).contains(&bp) { in_band_bp += 1; }
        lns.push(sp4.ln());
        eprintln!("seed {seed}: bp {bp:.3} sp4 {sp4:.3}");
    }
    let mean = lns.iter().sum::<f64>() / lns.len() as f64;
    let sd = (lns.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (lns.len() - 1) as f64).sqrt();
    eprintln!("sp4 in band {in_band_sp4}/{trials}; bp in band {in_band_bp}/{trials}; sp4 ln: mean {mean:.3} sd {sd:.3}");
}
