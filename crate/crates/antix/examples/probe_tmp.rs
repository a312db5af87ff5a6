// temporary probe
use antix::gradcheck::Differentiable;
use antix::nets::*;
use antix::tape::{Tape, Var};
use antix::tensor::Tensor;
use antix::params::Parameterized;
use rand::SeedableRng;

struct NetProbe { net: FusionNet, s: Tensor, a: Tensor }
impl Differentiable for NetProbe {
    fn scalar_loss(&self, tape: &mut Tape) -> antix::tape::Result<Var> {
        let s = tape.param("input.s", &self.s)?;
        let a = tape.param("input.a", &self.a)?;
        let out = self.net.forward(tape, Bind::Train, s, a)?;
        let sq = tape.mul(out, out)?;
        Ok(tape.sum_all(sq))
    }
    fn trainables_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, *mut Tensor)> = vec![
            ("input.s".into(), &mut self.s as *mut _),
            ("input.a".into(), &mut self.a as *mut _),
        ];
        self.net.visit_params_mut(&mut |name, t| { out.push((name.to_string(), t as *mut _)); });
        out.into_iter().map(|(n, p)| (n, unsafe { &mut *p })).collect()
    }
}

fn per_param_errors(p: &mut NetProbe, eps: f64) {
    let analytic = {
        let mut tape = Tape::new();
        let loss = p.scalar_loss(&mut tape).unwrap();
        tape.backward(loss).unwrap();
        tape.param_grads()
    };
    let layout: Vec<(String, usize)> = p.trainables_mut().iter().map(|(n,t)| (n.clone(), t.numel())).collect();
    for (pi, (name, numel)) in layout.iter().enumerate() {
        let g = &analytic[name];
        let mut worst = 0.0f64; let mut worst_idx = 0;
        for idx in 0..*numel {
            p.trainables_mut()[pi].1.data_mut()[idx] += eps;
            let plus = { let mut t = Tape::new(); let l = p.scalar_loss(&mut t).unwrap(); t.value(l).item() };
            p.trainables_mut()[pi].1.data_mut()[idx] -= 2.0*eps;
            let minus = { let mut t = Tape::new(); let l = p.scalar_loss(&mut t).unwrap(); t.value(l).item() };
            p.trainables_mut()[pi].1.data_mut()[idx] += eps;
            let numeric = (plus-minus)/(2.0*eps);
            let a = g.data()[idx];
            let rel = (a-numeric).abs()/a.abs().max(1.0);
            if rel > worst { worst = rel; worst_idx = idx; }
        }
        println!("{name}: worst {worst:.3e} at {worst_idx}");
    }
}

fn main() {
    let spec = NetSpec::new(3, 2).with_dims(6, 3, 4)
        .with_fusion(FusionKind::BilinearFull, Placement::FirstLayer)
        .with_layer_norm(true);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(10);
    let net = build_network(&spec, &mut rng).unwrap();
    let mut probe = NetProbe { net, s: Tensor::vector(vec![0.21,-0.43,0.85]), a: Tensor::vector(vec![0.52,-0.11]) };
    per_param_errors(&mut probe, 1e-5);
}
