//! C ABI over the compression library: opaque handles for loaded energy
//! models and network checkpoints, status codes for every fallible call, and
//! a per-thread error message for diagnostics. The header is generated by
//! cbindgen into `include/ecc.h` at build time.
//!
//! Ownership rules: every `*_load` hands the caller an owned handle that
//! must be released with the matching `*_free`; all other functions only
//! borrow their arguments.

use ecc_core::energy::{read_model_file, EnergyModelFile, SparsityVector};
use ecc_core::network::{load_checkpoint, Network};
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;

/// Status code returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EccStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// An argument failed validation (bad length, non-UTF-8 path, ...).
    InvalidArgument = 2,
    /// The file could not be read.
    Io = 3,
    /// The file was read but could not be parsed.
    Parse = 4,
    /// Vector length does not match the model or network.
    LengthMismatch = 5,
    /// Any other internal failure; see `ecc_last_error_message`.
    Internal = 6,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: impl Into<String>) {
    let owned = CString::new(message.into().replace('\0', "?"))
        .unwrap_or_else(|_| CString::new("error message unavailable").unwrap());
    LAST_ERROR.with(|slot| *slot.borrow_mut() = owned);
}

fn fail(status: EccStatus, message: impl Into<String>) -> EccStatus {
    set_error(message);
    status
}

/// Loaded bilinear energy model (opaque).
pub struct EccEnergyModel {
    file: EnergyModelFile,
}

/// Loaded network checkpoint (opaque).
pub struct EccNetwork {
    network: Network,
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ecc_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr().cast()
}

/// Copies the calling thread's last error message into `buffer` (truncated
/// to `length` bytes including the NUL terminator) and returns the full
/// message length. A zero return means no error has been recorded.
///
/// # Safety
/// `buffer` must point to at least `length` writable bytes, or be null
/// (in which case only the length is returned).
#[no_mangle]
pub unsafe extern "C" fn ecc_last_error_message(buffer: *mut c_char, length: usize) -> usize {
    LAST_ERROR.with(|slot| {
        let message = slot.borrow();
        let bytes = message.as_bytes_with_nul();
        if bytes.len() <= 1 {
            return 0;
        }
        if !buffer.is_null() && length > 0 {
            let n = bytes.len().min(length);
            unsafe {
                std::ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buffer, n);
                // always terminate
                *buffer.add(n - 1) = 0;
            }
        }
        bytes.len()
    })
}

unsafe fn path_from(ptr: *const c_char) -> Result<&'static Path, EccStatus> {
    if ptr.is_null() {
        return Err(fail(EccStatus::NullArgument, "path is null"));
    }
    let cstr = unsafe { CStr::from_ptr(ptr) };
    match cstr.to_str() {
        Ok(s) => Ok(Path::new(s)),
        Err(_) => Err(fail(EccStatus::InvalidArgument, "path is not UTF-8")),
    }
}

/// Loads a fitted energy-model file. On success `*out` owns the handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ecc_energy_model_load(
    path: *const c_char,
    out: *mut *mut EccEnergyModel,
) -> EccStatus {
    if out.is_null() {
        return fail(EccStatus::NullArgument, "out is null");
    }
    let path = match unsafe { path_from(path) } {
        Ok(p) => p,
        Err(status) => return status,
    };
    match read_model_file(path) {
        Ok(file) => {
            let handle = Box::new(EccEnergyModel { file });
            unsafe { *out = Box::into_raw(handle) };
            EccStatus::Ok
        }
        Err(e) => {
            let status = if e.to_string().contains("parse") {
                EccStatus::Parse
            } else {
                EccStatus::Io
            };
            fail(status, e.to_string())
        }
    }
}

/// Releases a model handle; a null handle is a no-op.
///
/// # Safety
/// `model` must have come from `ecc_energy_model_load` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn ecc_energy_model_free(model: *mut EccEnergyModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Number of layers the model covers.
///
/// # Safety
/// `model` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn ecc_energy_model_layers(
    model: *const EccEnergyModel,
    out: *mut usize,
) -> EccStatus {
    if model.is_null() || out.is_null() {
        return fail(EccStatus::NullArgument, "model or out is null");
    }
    unsafe { *out = (*model).file.model.num_layers() };
    EccStatus::Ok
}

unsafe fn sparsity_from(
    model: &EccEnergyModel,
    s: *const f64,
    length: usize,
) -> Result<SparsityVector, EccStatus> {
    if s.is_null() {
        return Err(fail(EccStatus::NullArgument, "s is null"));
    }
    if length != model.file.model.num_layers() {
        return Err(fail(
            EccStatus::LengthMismatch,
            format!(
                "s has {length} entries, model covers {} layers",
                model.file.model.num_layers()
            ),
        ));
    }
    let values = unsafe { std::slice::from_raw_parts(s, length) };
    if values.iter().any(|v| !v.is_finite() || *v < 1.0) {
        return Err(fail(
            EccStatus::InvalidArgument,
            "sparsities must be finite and >= 1",
        ));
    }
    Ok(SparsityVector::new(values.to_vec(), model.file.output_dim))
}

/// Evaluates the estimated energy (joules) at a per-layer sparsity vector of
/// `length` entries; the output dimensionality stored in the model file
/// closes the final bilinear term.
///
/// # Safety
/// `s` must point to `length` readable doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ecc_energy_model_eval(
    model: *const EccEnergyModel,
    s: *const f64,
    length: usize,
    out: *mut f64,
) -> EccStatus {
    if model.is_null() || out.is_null() {
        return fail(EccStatus::NullArgument, "model or out is null");
    }
    let model = unsafe { &*model };
    let sv = match unsafe { sparsity_from(model, s, length) } {
        Ok(v) => v,
        Err(status) => return status,
    };
    match model.file.model.eval(&sv) {
        Ok(v) => {
            unsafe { *out = v };
            EccStatus::Ok
        }
        Err(e) => fail(EccStatus::Internal, e.to_string()),
    }
}

/// Writes the gradient of the energy estimate with respect to each layer
/// sparsity into `out_grad` (`length` doubles).
///
/// # Safety
/// `s` and `out_grad` must point to `length` readable/writable doubles.
#[no_mangle]
pub unsafe extern "C" fn ecc_energy_model_grad(
    model: *const EccEnergyModel,
    s: *const f64,
    length: usize,
    out_grad: *mut f64,
) -> EccStatus {
    if model.is_null() || out_grad.is_null() {
        return fail(EccStatus::NullArgument, "model or out_grad is null");
    }
    let model = unsafe { &*model };
    let sv = match unsafe { sparsity_from(model, s, length) } {
        Ok(v) => v,
        Err(status) => return status,
    };
    match model.file.model.grad_s(&sv) {
        Ok(grad) => {
            unsafe { std::ptr::copy_nonoverlapping(grad.as_ptr(), out_grad, grad.len()) };
            EccStatus::Ok
        }
        Err(e) => fail(EccStatus::Internal, e.to_string()),
    }
}

/// Loads a network checkpoint. On success `*out` owns the handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ecc_network_load(
    path: *const c_char,
    out: *mut *mut EccNetwork,
) -> EccStatus {
    if out.is_null() {
        return fail(EccStatus::NullArgument, "out is null");
    }
    let path = match unsafe { path_from(path) } {
        Ok(p) => p,
        Err(status) => return status,
    };
    match load_checkpoint(path) {
        Ok((network, _)) => {
            let handle = Box::new(EccNetwork { network });
            unsafe { *out = Box::into_raw(handle) };
            EccStatus::Ok
        }
        Err(e) => {
            let status = if e.to_string().contains("parse") {
                EccStatus::Parse
            } else {
                EccStatus::Io
            };
            fail(status, e.to_string())
        }
    }
}

/// Releases a network handle; a null handle is a no-op.
///
/// # Safety
/// `network` must have come from `ecc_network_load` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn ecc_network_free(network: *mut EccNetwork) {
    if !network.is_null() {
        drop(unsafe { Box::from_raw(network) });
    }
}

/// Number of layers in the network.
///
/// # Safety
/// `network` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn ecc_network_num_layers(
    network: *const EccNetwork,
    out: *mut usize,
) -> EccStatus {
    if network.is_null() || out.is_null() {
        return fail(EccStatus::NullArgument, "network or out is null");
    }
    unsafe { *out = (*network).network.layers.len() };
    EccStatus::Ok
}

/// Network output dimensionality (class count).
///
/// # Safety
/// `network` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn ecc_network_output_dim(
    network: *const EccNetwork,
    out: *mut usize,
) -> EccStatus {
    if network.is_null() || out.is_null() {
        return fail(EccStatus::NullArgument, "network or out is null");
    }
    unsafe { *out = (*network).network.n_out() };
    EccStatus::Ok
}

/// Writes each layer's sparsity (count of input channels with nonzero
/// weights) into `out` (`length` entries, one per layer).
///
/// # Safety
/// `out` must point to `length` writable `size_t` slots.
#[no_mangle]
pub unsafe extern "C" fn ecc_network_sparsities(
    network: *const EccNetwork,
    out: *mut usize,
    length: usize,
) -> EccStatus {
    if network.is_null() || out.is_null() {
        return fail(EccStatus::NullArgument, "network or out is null");
    }
    let network = unsafe { &*network };
    if length != network.network.layers.len() {
        return fail(
            EccStatus::LengthMismatch,
            format!(
                "out has {length} slots, network has {} layers",
                network.network.layers.len()
            ),
        );
    }
    let phi = network.network.sparsities(0.0);
    unsafe { std::ptr::copy_nonoverlapping(phi.as_ptr(), out, phi.len()) };
    EccStatus::Ok
}

/// Estimated energy of the network under a loaded model, evaluated at the
/// network's current layer sparsities.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ecc_network_predicted_energy(
    network: *const EccNetwork,
    model: *const EccEnergyModel,
    out: *mut f64,
) -> EccStatus {
    if network.is_null() || model.is_null() || out.is_null() {
        return fail(EccStatus::NullArgument, "an argument is null");
    }
    let network = unsafe { &*network };
    let model = unsafe { &*model };
    if model.file.model.num_layers() != network.network.layers.len() {
        return fail(
            EccStatus::LengthMismatch,
            "model and network disagree on the layer count",
        );
    }
    let s = network.network.sparsity_vector(0.0);
    match model.file.model.eval(&s) {
        Ok(v) => {
            unsafe { *out = v };
            EccStatus::Ok
        }
        Err(e) => fail(EccStatus::Internal, e.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ecc_core::energy::{write_model_file, BilinearEnergyModel};
    use ecc_core::network::{save_checkpoint, Activation, CheckpointMeta, LayerSpec};
    use std::ffi::{c_char, CString};

    fn model_fixture(dir: &Path) -> CString {
        let path = dir.join("model.txt");
        write_model_file(
            &path,
            &EnergyModelFile {
                model: BilinearEnergyModel::new(1.0, vec![2.0, 3.0]),
                output_dim: 4,
                feature_means: vec![6.0, 12.0],
                energy_scale: 49.0,
                seed: 1,
                iterations: 10,
                train_error: 0.0,
                test_error: 0.0,
                config_hash: "test".into(),
            },
        )
        .unwrap();
        CString::new(path.to_str().unwrap()).unwrap()
    }

    fn network_fixture(dir: &Path) -> CString {
        let specs = vec![
            LayerSpec::conv(2, 3, (3, 3), 1, 1, Activation::Relu),
            LayerSpec::fully_connected(3, 4, Activation::None),
        ];
        let net = Network::random_init(&specs, 5).unwrap();
        let path = dir.join("net.eccnet");
        save_checkpoint(
            &path,
            &net,
            &CheckpointMeta {
                config_hash: "test".into(),
                seed: 5,
            },
        )
        .unwrap();
        CString::new(path.to_str().unwrap()).unwrap()
    }

    #[test]
    fn model_round_trip_through_the_c_surface() {
        let dir = tempfile::tempdir().unwrap();
        let path = model_fixture(dir.path());
        let mut handle: *mut EccEnergyModel = std::ptr::null_mut();
        unsafe {
            assert_eq!(ecc_energy_model_load(path.as_ptr(), &mut handle), EccStatus::Ok);
            let mut layers = 0usize;
            assert_eq!(ecc_energy_model_layers(handle, &mut layers), EccStatus::Ok);
            assert_eq!(layers, 2);

            // a0=1, a=(2,3), s=(2,3), out 4: 1 + 2*6 + 3*12 = 49
            let s = [2.0f64, 3.0];
            let mut energy = 0.0f64;
            assert_eq!(
                ecc_energy_model_eval(handle, s.as_ptr(), 2, &mut energy),
                EccStatus::Ok
            );
            assert_eq!(energy, 49.0);

            let mut grad = [0.0f64; 2];
            assert_eq!(
                ecc_energy_model_grad(handle, s.as_ptr(), 2, grad.as_mut_ptr()),
                EccStatus::Ok
            );
            assert_eq!(grad, [6.0, 16.0]);

            ecc_energy_model_free(handle);
        }
    }

    #[test]
    fn length_mismatch_is_reported_with_message() {
        let dir = tempfile::tempdir().unwrap();
        let path = model_fixture(dir.path());
        let mut handle: *mut EccEnergyModel = std::ptr::null_mut();
        unsafe {
            assert_eq!(ecc_energy_model_load(path.as_ptr(), &mut handle), EccStatus::Ok);
            let s = [2.0f64];
            let mut energy = 0.0f64;
            assert_eq!(
                ecc_energy_model_eval(handle, s.as_ptr(), 1, &mut energy),
                EccStatus::LengthMismatch
            );
            let needed = ecc_last_error_message(std::ptr::null_mut(), 0);
            assert!(needed > 0);
            let mut buf = vec![0 as c_char; needed];
            ecc_last_error_message(buf.as_mut_ptr(), buf.len());
            let message = CStr::from_ptr(buf.as_ptr()).to_string_lossy();
            assert!(message.contains("layers"), "message: {message}");
            ecc_energy_model_free(handle);
        }
    }

    #[test]
    fn missing_file_reports_io() {
        let mut handle: *mut EccEnergyModel = std::ptr::null_mut();
        let path = CString::new("/nonexistent/model.txt").unwrap();
        unsafe {
            assert_eq!(
                ecc_energy_model_load(path.as_ptr(), &mut handle),
                EccStatus::Io
            );
        }
        assert!(handle.is_null());
    }

    #[test]
    fn network_handle_reports_structure_and_energy() {
        let dir = tempfile::tempdir().unwrap();
        let net_path = network_fixture(dir.path());
        let model_path = model_fixture(dir.path());
        unsafe {
            let mut net: *mut EccNetwork = std::ptr::null_mut();
            assert_eq!(ecc_network_load(net_path.as_ptr(), &mut net), EccStatus::Ok);
            let mut model: *mut EccEnergyModel = std::ptr::null_mut();
            assert_eq!(
                ecc_energy_model_load(model_path.as_ptr(), &mut model),
                EccStatus::Ok
            );

            let mut layers = 0usize;
            assert_eq!(ecc_network_num_layers(net, &mut layers), EccStatus::Ok);
            assert_eq!(layers, 2);
            let mut out_dim = 0usize;
            assert_eq!(ecc_network_output_dim(net, &mut out_dim), EccStatus::Ok);
            assert_eq!(out_dim, 4);

            let mut phi = [0usize; 2];
            assert_eq!(
                ecc_network_sparsities(net, phi.as_mut_ptr(), 2),
                EccStatus::Ok
            );
            assert_eq!(phi, [2, 3]); // dense random network

            let mut energy = 0.0f64;
            assert_eq!(
                ecc_network_predicted_energy(net, model, &mut energy),
                EccStatus::Ok
            );
            // a0=1, a=(2,3), s=(2,3), out 4
            assert_eq!(energy, 49.0);

            ecc_network_free(net);
            ecc_energy_model_free(model);
        }
    }

    #[test]
    fn null_arguments_are_rejected() {
        unsafe {
            assert_eq!(
                ecc_energy_model_load(std::ptr::null(), std::ptr::null_mut()),
                EccStatus::NullArgument
            );
            let mut out = 0.0f64;
            assert_eq!(
                ecc_energy_model_eval(std::ptr::null(), std::ptr::null(), 0, &mut out),
                EccStatus::NullArgument
            );
            ecc_energy_model_free(std::ptr::null_mut());
            ecc_network_free(std::ptr::null_mut());
        }
    }

    #[test]
    fn version_is_a_nul_terminated_string() {
        let v = unsafe { CStr::from_ptr(ecc_version()) };
        assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
    }
}
