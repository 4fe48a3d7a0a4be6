#[no_mangle]
pub extern "C" fn jg_abi_version() -> u32 { 1 }
