//! Shared trainable parameter cells and named parameter groups.

use std::cell::{Ref, RefCell, RefMut};
use std::rc::Rc;

use super::{NnError, NnResult, Tensor};

/// A named, shared parameter. Models hold `Param`s; graphs bind them as
/// leaves and flush gradients back after `backward`.
#[derive(Clone)]
pub struct Param {
    name: Rc<str>,
    value: Rc<RefCell<Tensor>>,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Self {
            name: Rc::from(name.into()),
            value: Rc::new(RefCell::new(value)),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn borrow(&self) -> Ref<'_, Tensor> {
        self.value.borrow()
    }

    pub fn borrow_mut(&self) -> RefMut<'_, Tensor> {
        self.value.borrow_mut()
    }

    /// Identity of the underlying cell; two clones of one `Param` share it.
    pub fn cell_id(&self) -> usize {
        Rc::as_ptr(&self.value) as usize
    }

    /// Independent copy of the parameter (fresh cell, no gradient).
    pub fn deep_clone(&self) -> Self {
        let mut t = self.value.borrow().clone();
        t.clear_grad();
        Self {
            name: self.name.clone(),
            value: Rc::new(RefCell::new(t)),
        }
    }
}

impl std::fmt::Debug for Param {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Param({}, {:?})", self.name, self.value.borrow().shape())
    }
}

/// A list of parameters stepped together, with a learning-rate multiplier
/// relative to the optimizer's base rate.
#[derive(Clone)]
pub struct ParameterGroup {
    pub name: String,
    pub params: Vec<Param>,
    pub lr_scale: f32,
}

impl ParameterGroup {
    pub fn new(name: impl Into<String>, params: Vec<Param>, lr_scale: f32) -> NnResult<Self> {
        let name = name.into();
        if params.is_empty() {
            return Err(NnError::EmptyGroup(name));
        }
        if !(lr_scale > 0.0) || !lr_scale.is_finite() {
            return Err(NnError::BadConfig {
                op: "ParameterGroup::new",
                reason: format!("lr_scale must be positive, got {lr_scale}"),
            });
        }
        Ok(Self {
            name,
            params,
            lr_scale,
        })
    }

    pub fn clear_grads(&self) {
        for p in &self.params {
            p.borrow_mut().clear_grad();
        }
    }
}

/// Total element count over the group. An empty group is a construction bug
/// and reports an error rather than 0.
pub fn param_count(group: &ParameterGroup) -> NnResult<usize> {
    if group.params.is_empty() {
        return Err(NnError::EmptyGroup(group.name.clone()));
    }
    Ok(group.params.iter().map(|p| p.borrow().numel()).sum())
}

/// Element count over several groups; additive over concatenation.
pub fn param_count_all(groups: &[ParameterGroup]) -> NnResult<usize> {
    let mut total = 0;
    for g in groups {
        total += param_count(g)?;
    }
    Ok(total)
}
