//! Random composite scalar functions built from the tape primitives, plus
//! a central finite-difference oracle to check their gradients against.

#![allow(dead_code)]

use larl_tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub enum Step {
    Tanh,
    Sigmoid,
    ExpTanh,
    LogSigmoid,
    Softmax,
    LogSoftmax,
    MatMul(usize),
    AddInput(usize),
    MulInput(usize),
    AddRow(usize),
    MulCol(usize),
    ConcatSelf,
    SliceCols,
    Transpose,
    EmbedRows(Vec<usize>),
    Gather(Vec<usize>),
    Scale(f64),
    Sub(usize),
    SumLast,
    DropoutFixed(Vec<f64>),
    Clamp,
}

/// A sampled program: one leading input, extra operand inputs, the steps,
/// and the final reduction (sum or mean).
#[derive(Clone, Debug)]
pub struct Program {
    pub inputs: Vec<Tensor<f64>>,
    pub steps: Vec<Step>,
    pub mean: bool,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Samples a program of at most `max_steps` primitives (excluding the final
/// reduction) acting on a random `[rows, cols]` input.
pub fn sample_program(seed: u64, max_steps: usize) -> Program {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shape = vec![rng.random_range(1..4), rng.random_range(2..5)];
    let mut inputs = vec![rand_tensor(&mut rng, &shape)];
    let n_steps = rng.random_range(1..=max_steps);
    let mut steps = Vec::new();
    for _ in 0..n_steps {
        let (r, c) = (shape[0], shape[1]);
        let step = match rng.random_range(0..20) {
            0 => Step::Tanh,
            1 => Step::Sigmoid,
            2 => Step::ExpTanh,
            3 => Step::LogSigmoid,
            4 => Step::Softmax,
            5 => Step::LogSoftmax,
            6 => {
                let k = rng.random_range(1..5);
                inputs.push(rand_tensor(&mut rng, &[c, k]));
                shape = vec![r, k];
                Step::MatMul(inputs.len() - 1)
            }
            7 => {
                inputs.push(rand_tensor(&mut rng, &[r, c]));
                Step::AddInput(inputs.len() - 1)
            }
            8 => {
                inputs.push(rand_tensor(&mut rng, &[r, c]));
                Step::MulInput(inputs.len() - 1)
            }
            9 => {
                inputs.push(rand_tensor(&mut rng, &[c]));
                Step::AddRow(inputs.len() - 1)
            }
            10 => {
                inputs.push(rand_tensor(&mut rng, &[r, 1]));
                Step::MulCol(inputs.len() - 1)
            }
            11 => {
                shape = vec![r, 2 * c];
                Step::ConcatSelf
            }
            12 if c > 1 => {
                shape = vec![r, c - 1];
                Step::SliceCols
            }
            13 => {
                shape = vec![c, r];
                Step::Transpose
            }
            14 => {
                let n = rng.random_range(1..4);
                let ids: Vec<usize> = (0..n).map(|_| rng.random_range(0..r)).collect();
                shape = vec![n, c];
                Step::EmbedRows(ids)
            }
            15 => {
                let idx = (0..r).map(|_| rng.random_range(0..c)).collect();
                shape = vec![r, 1];
                Step::Gather(idx)
            }
            16 => Step::Scale(rng.random_range(-2.0..2.0)),
            17 => {
                inputs.push(rand_tensor(&mut rng, &[r, c]));
                Step::Sub(inputs.len() - 1)
            }
            18 => {
                shape = vec![r, 1];
                Step::SumLast
            }
            19 => Step::Clamp,
            _ => {
                let mask = (0..r * c).map(|_| rng.random::<f64>()).collect();
                Step::DropoutFixed(mask)
            }
        };
        steps.push(step);
    }
    Program {
        inputs,
        steps,
        mean: rng.random_bool(0.5),
    }
}

/// Records `program` on `tape` with `inputs` as differentiable leaves.
pub fn build(tape: &mut Tape<f64>, program: &Program, inputs: &[Tensor<f64>]) -> (Vec<Var>, Var) {
    tape.set_train(true);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let mut x = vars[0];
    for step in &program.steps {
        x = match step {
            Step::Tanh => tape.tanh(x),
            Step::Sigmoid => tape.sigmoid(x),
            Step::ExpTanh => {
                let t = tape.tanh(x);
                tape.exp(t)
            }
            Step::LogSigmoid => {
                let s = tape.sigmoid(x);
                tape.log(s)
            }
            Step::Softmax => tape.softmax(x),
            Step::LogSoftmax => tape.log_softmax(x),
            Step::MatMul(i) => tape.matmul(x, vars[*i]).unwrap(),
            Step::AddInput(i) => tape.add(x, vars[*i]).unwrap(),
            Step::MulInput(i) => tape.mul(x, vars[*i]).unwrap(),
            Step::AddRow(i) => tape.add_row(x, vars[*i]).unwrap(),
            Step::MulCol(i) => tape.mul_col(x, vars[*i]).unwrap(),
            Step::ConcatSelf => {
                let t = tape.tanh(x);
                tape.concat(&[x, t], 1).unwrap()
            }
            Step::SliceCols => {
                let c = tape.shape(x)[1];
                tape.slice(x, 1, 1, c - 1).unwrap()
            }
            Step::Transpose => tape.transpose(x).unwrap(),
            Step::EmbedRows(ids) => tape.embedding(x, ids).unwrap(),
            Step::Gather(idx) => tape.gather(x, idx).unwrap(),
            Step::Scale(k) => tape.scale(x, *k),
            Step::Sub(i) => tape.sub(x, vars[*i]).unwrap(),
            Step::SumLast => tape.sum_last(x),
            Step::Clamp => tape.clamp(x, -0.5, 0.5),
            Step::DropoutFixed(draws) => {
                let mut it = draws.iter().copied();
                tape.dropout(x, 0.3, || it.next().unwrap()).unwrap()
            }
        };
    }
    let out = if program.mean {
        tape.mean(x)
    } else {
        tape.sum(x)
    };
    (vars, out)
}

pub fn eval(program: &Program, inputs: &[Tensor<f64>]) -> f64 {
    let mut tape = Tape::no_grad();
    let (_, out) = build(&mut tape, program, inputs);
    tape.value(out).item().unwrap()
}

/// Largest relative error between tape gradients and central differences
/// (step `h`), with magnitudes floored at `floor`.
pub fn max_relative_error(program: &Program, h: f64, floor: f64) -> f64 {
    let mut tape = Tape::with_grad();
    let (vars, out) = build(&mut tape, program, &program.inputs);
    let grads = tape.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v).map(|g| g.data().to_vec());
        for j in 0..program.inputs[k].len() {
            let mut plus = program.inputs.clone();
            plus[k].data_mut()[j] += h;
            let mut minus = program.inputs.clone();
            minus[k].data_mut()[j] -= h;
            let numeric = (eval(program, &plus) - eval(program, &minus)) / (2.0 * h);
            let a = analytic.as_ref().map(|g| g[j]).unwrap_or(0.0);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst = worst.max(rel);
        }
    }
    worst
}
