//! Lazy depth-first traversal of the step tree.
//!
//! Loop counts and conditional predicates are evaluated against the scope at
//! the moment the construct is reached, so values captured earlier in a run can
//! steer control flow.

use super::template::{Scope, ScopeValue, TemplateError};
use super::{LoopCount, LoopStep, Playbook, PredicateError, Step, StepKind};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CursorError {
    #[error("loop count variable: {0}")]
    LoopCountUnset(TemplateError),
    #[error("loop count variable `{name}` is not a non-negative integer (value `{value}`)")]
    LoopCountNotNumeric { name: String, value: String },
    #[error("condition: {0}")]
    Predicate(#[from] PredicateError),
}

enum Frame<'a> {
    Block { steps: &'a [Step], pos: usize },
    Loop { step: &'a LoopStep, count: u64, iteration: u64 },
}

pub struct ExecutionCursor<'a> {
    stack: Vec<Frame<'a>>,
}

impl<'a> ExecutionCursor<'a> {
    pub fn new(pb: &'a Playbook) -> Self {
        Self::over(&pb.actions)
    }

    pub fn over(steps: &'a [Step]) -> Self {
        ExecutionCursor {
            stack: vec![Frame::Block { steps, pos: 0 }],
        }
    }

    /// Current iteration number of each enclosing loop, outermost first.
    pub fn iterations(&self) -> Vec<u64> {
        self.stack
            .iter()
            .filter_map(|f| match f {
                Frame::Loop { iteration, .. } => Some(*iteration),
                Frame::Block { .. } => None,
            })
            .collect()
    }

    /// Advances to the next leaf step. Loop index variables are bound in
    /// `scope` while their loop runs and removed when it finishes.
    pub fn next_step(&mut self, scope: &mut Scope) -> Result<Option<&'a Step>, CursorError> {
        loop {
            let Some(top) = self.stack.last_mut() else {
                return Ok(None);
            };
            match top {
                Frame::Block { steps, pos } => {
                    let steps: &'a [Step] = steps;
                    let Some(step) = steps.get(*pos) else {
                        self.stack.pop();
                        continue;
                    };
                    *pos += 1;
                    match &step.kind {
                        StepKind::Action(_) | StepKind::Test { .. } => return Ok(Some(step)),
                        StepKind::Loop(l) => {
                            let count = loop_count(l, scope)?;
                            self.stack.push(Frame::Loop {
                                step: l,
                                count,
                                iteration: 0,
                            });
                        }
                        StepKind::Conditional(c) => {
                            let branch: &'a [Step] = if c.predicate.evaluate(scope)? {
                                &c.then
                            } else {
                                c.otherwise.as_deref().unwrap_or(&[])
                            };
                            self.stack.push(Frame::Block {
                                steps: branch,
                                pos: 0,
                            });
                        }
                    }
                }
                Frame::Loop {
                    step,
                    count,
                    iteration,
                } => {
                    let step: &'a LoopStep = step;
                    if *iteration < *count {
                        *iteration += 1;
                        if let Some(index) = &step.index {
                            scope.set(index.clone(), ScopeValue::Number(*iteration as f64));
                        }
                        self.stack.push(Frame::Block {
                            steps: &step.body,
                            pos: 0,
                        });
                    } else {
                        if let Some(index) = &step.index {
                            scope.remove(index);
                        }
                        self.stack.pop();
                    }
                }
            }
        }
    }
}

fn loop_count(l: &LoopStep, scope: &Scope) -> Result<u64, CursorError> {
    match &l.count {
        LoopCount::Literal(n) => Ok(u64::from(*n)),
        LoopCount::Variable(name) => {
            let value = scope.lookup(name).map_err(CursorError::LoopCountUnset)?;
            match value.as_number() {
                Some(n) if n >= 0.0 && n.fract() == 0.0 => Ok(n as u64),
                _ => Err(CursorError::LoopCountNotNumeric {
                    name: name.clone(),
                    value: value.to_string(),
                }),
            }
        }
    }
}
