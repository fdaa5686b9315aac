//! Scenario tables, best responses and equilibria against a plain floating-point
//! re-implementation of the market.

use equisim_core::diagnostics::DrawTensor;
use equisim_core::market::{ChoiceRule, Market, MarketSpec, ParamSet};
use equisim_core::nash::{find_all_equilibria, fixed_point_scan};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const M: usize = 5;

fn spec(n_firms: usize, line_size: usize) -> MarketSpec {
    MarketSpec {
        n_features: 2,
        n_levels: M,
        prices: vec![29_900, 59_900, 89_900, 119_900, 149_900],
        costs: vec![2_500, 3_000, 3_300, 4_400, 5_400],
        delta: 11_900,
        n_firms,
        line_size,
        feature_names: Vec::new(),
    }
}

fn draws(n_resp: usize, n_draws: usize, seed: u64) -> DrawTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let o = 2 * (M - 1);
    DrawTensor {
        n_respondents: n_resp,
        n_params: o,
        n_draws,
        draws: (0..n_draws * n_resp * o).map(|_| rng.random_range(-3.0..3.0)).collect(),
        thinning_factor: 1,
        source_chain_length: 0,
    }
}

/// Straightforward model: products as (price level, second level), lines as
/// sorted combinations, every quantity recomputed from scratch.
struct Oracle {
    spec: MarketSpec,
    rule: ChoiceRule,
    draws: DrawTensor,
    lines: Vec<Vec<usize>>,
}

impl Oracle {
    fn new(spec: MarketSpec, rule: ChoiceRule, draws: DrawTensor) -> Self {
        let lines = combinations(M * M, spec.line_size);
        Self { spec, rule, draws, lines }
    }

    fn utility(&self, n: usize, i: usize, product: usize) -> f64 {
        let beta = self.draws.draw(n, i);
        let (price, other) = (product / M, product % M);
        let pw = |f: usize, lv: usize| if lv == 0 { 0.0 } else { beta[f * (M - 1) + lv - 1] };
        pw(0, price) + pw(1, other)
    }

    fn unit_margin(&self, product: usize) -> f64 {
        let (price, other) = (product / M, product % M);
        (self.spec.prices[price] - self.spec.costs[other] - self.spec.delta) as f64
    }

    fn margin(&self, scenario: &[usize], firm: usize) -> f64 {
        let products: Vec<(usize, usize)> =
            scenario.iter().enumerate().flat_map(|(w, &a)| self.lines[a].iter().map(move |&p| (w, p))).collect();
        let mut total = 0.0;
        for n in 0..self.draws.n_draws {
            for i in 0..self.draws.n_respondents {
                let u: Vec<f64> = products.iter().map(|&(_, p)| self.utility(n, i, p)).collect();
                let shares: Vec<f64> = match self.rule {
                    ChoiceRule::First => {
                        let best = u.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let ties = u.iter().filter(|&&x| x == best).count() as f64;
                        u.iter().map(|&x| if x == best { 1.0 / ties } else { 0.0 }).collect()
                    }
                    ChoiceRule::Logit => {
                        let e: Vec<f64> = u.iter().map(|x| x.exp()).collect();
                        let s: f64 = e.iter().sum();
                        e.iter().map(|x| x / s).collect()
                    }
                };
                for (&(w, p), s) in products.iter().zip(shares) {
                    if w == firm {
                        total += s * self.unit_margin(p);
                    }
                }
            }
        }
        total / self.draws.n_draws as f64
    }
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for x in start..n {
            cur.push(x);
            rec(x + 1, n, k, cur, out);
            cur.pop();
        }
    }
    rec(0, n, k, &mut cur, &mut out);
    // colex order: compare from the largest element down
    out.sort_by(|a, b| a.iter().rev().cmp(b.iter().rev()));
    out
}

fn decode(mut rank: usize, a: usize, w: usize) -> Vec<usize> {
    let mut out = vec![0; w];
    for slot in out.iter_mut().rev() {
        *slot = rank % a;
        rank /= a;
    }
    out
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

fn check(n_firms: usize, line_size: usize, rule: ChoiceRule, seed: u64) {
    let spec = spec(n_firms, line_size);
    let d = draws(6, 2, seed);
    let market = Market::new(&spec, &ParamSet::draws(d.clone(), rule)).unwrap();
    let oracle = Oracle::new(spec, rule, d);
    let a = oracle.lines.len();
    assert_eq!(market.n_lines(), a);
    for (r, line) in oracle.lines.iter().enumerate() {
        let got: Vec<usize> = market.line_products(r).iter().map(|&p| p as usize).collect();
        assert_eq!(&got, line, "line {r}");
    }

    let (m, mopt) = market.precompute(1 << 20).unwrap();
    let margins: Vec<f64> = (0..m.n_rows()).map(|k| oracle.margin(&decode(k, a, n_firms), 0)).collect();
    for (k, (&got, &want)) in m.margins.iter().zip(&margins).enumerate() {
        assert!(close(got, want), "scenario {k}: {got} vs {want}");
    }

    // firm symmetry lets the firm-0 table answer for every firm
    let of = |lines: &[usize], firm: usize| {
        let mut v = vec![lines[firm]];
        v.extend(lines.iter().enumerate().filter(|&(w, _)| w != firm).map(|(_, &x)| x));
        margins[v.iter().fold(0, |acc, &x| acc * a + x)]
    };
    let n_partial = a.pow(n_firms as u32 - 1);
    for partial in 0..n_partial {
        let rivals = decode(partial, a, n_firms - 1);
        let with = |line: usize| {
            let mut s = vec![line];
            s.extend(&rivals);
            s
        };
        let best = (0..a).map(|x| of(&with(x), 0)).fold(f64::NEG_INFINITY, f64::max);
        let chosen = mopt.best_line[partial] as usize;
        assert!(close(of(&with(chosen), 0), best), "partial {partial}: line {chosen} is not a best response");
    }

    let summary = find_all_equilibria(&mopt, 20);
    let scan = fixed_point_scan(&m, &mopt);
    assert_eq!(summary.equilibria.scenarios, scan);
    for &k in &scan {
        let lines = decode(k, a, n_firms);
        for firm in 0..n_firms {
            let here = of(&lines, firm);
            let best = (0..a)
                .map(|x| {
                    let mut alt = lines.clone();
                    alt[firm] = x;
                    of(&alt, firm)
                })
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(close(here, best), "scenario {k}: firm {firm} can improve");
        }
    }
    assert_eq!(
        summary.outcomes.len(),
        n_partial,
        "one game per initial state of the rivals"
    );
}

#[test]
fn duopoly_single_products() {
    for rule in ChoiceRule::ALL {
        for seed in 0..3 {
            check(2, 1, rule, seed);
        }
    }
}

#[test]
fn three_firms_single_products() {
    for rule in ChoiceRule::ALL {
        check(3, 1, rule, 10);
    }
}

#[test]
fn duopoly_two_product_lines() {
    for rule in ChoiceRule::ALL {
        check(2, 2, rule, 20);
    }
}
