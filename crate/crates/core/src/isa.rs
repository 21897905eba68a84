//! Static token classes used by the synthetic augmenter and the fixture
//! generator. Only the token spellings matter; no encoding is modelled.

/// Register families. Renaming only permutes within a family.
pub const REGISTER_FAMILIES: &[&[&str]] = &[
    &[
        "rax", "rbx", "rcx", "rdx", "rsi", "rdi", "r8", "r9", "r10", "r11", "r12", "r13", "r14", "r15",
    ],
    &[
        "eax", "ebx", "ecx", "edx", "esi", "edi", "r8d", "r9d", "r10d", "r11d", "r12d", "r13d", "r14d", "r15d",
    ],
    &["xmm0", "xmm1", "xmm2", "xmm3", "xmm4", "xmm5", "xmm6", "xmm7"],
    &[
        "r0", "r1", "r2", "r3", "r4", "r5", "r6", "r7", "r8", "r9", "r10", "r11", "r12",
    ],
    &[
        "x0", "x1", "x2", "x3", "x4", "x5", "x6", "x7", "x8", "x9", "x10", "x19", "x20", "x21", "x22",
    ],
    &[
        "$v0", "$v1", "$a0", "$a1", "$a2", "$a3", "$t0", "$t1", "$t2", "$t3", "$s0", "$s1", "$s2", "$s3",
    ],
];

/// Registers with a fixed role; never renamed.
pub const FIXED_REGISTERS: &[&str] = &["rbp", "rsp", "ebp", "esp", "rip", "sp", "fp", "lr", "pc", "$sp", "$fp", "$ra"];

/// Interchangeable spellings of one operation.
pub const SYNONYMS: &[&[&str]] = &[
    &["je", "jz"],
    &["jne", "jnz"],
    &["jb", "jc", "jnae"],
    &["jae", "jnb", "jnc"],
    &["ja", "jnbe"],
    &["jbe", "jna"],
    &["jl", "jnge"],
    &["jge", "jnl"],
    &["jg", "jnle"],
    &["jle", "jng"],
    &["sete", "setz"],
    &["setne", "setnz"],
    &["shl", "sal"],
    &["cmove", "cmovz"],
    &["cmovne", "cmovnz"],
    &["ret", "retn"],
];

/// Mnemonics that end a basic block.
pub const TERMINATORS: &[&str] = &[
    "jmp", "je", "jz", "jne", "jnz", "jb", "jc", "jnae", "jae", "jnb", "jnc", "ja", "jnbe", "jbe", "jna", "jl",
    "jnge", "jge", "jnl", "jg", "jnle", "jle", "jng", "ret", "retn", "b", "beq", "bne", "bl", "jr", "jal",
];

/// Mnemonics treated as instruction starts, besides terminators.
pub const MNEMONICS: &[&str] = &[
    "mov", "push", "pop", "lea", "add", "sub", "cmp", "test", "call", "xor", "and", "or", "shl", "sal", "shr",
    "sar", "imul", "idiv", "div", "mul", "movzx", "movsx", "movsxd", "cmove", "cmovz", "cmovne", "cmovnz",
    "sete", "setz", "setne", "setnz", "inc", "dec", "neg", "not", "leave", "nop", "cdqe", "cqo", "cdq",
    "sbb", "adc", "rol", "ror", "bt", "xchg", "movss", "movsd", "cvtsi2sd", "addsd", "mulsd", "subsd",
    "divsd", "pxor", "ucomisd", "movaps", "movups", "stosq", "rep", "endbr64", "ldr", "str", "stp", "ldp",
    "adrp", "movk", "lw", "sw", "addiu", "lui",
];

pub const NOP: &str = "nop";
pub const JMP: &str = "jmp";

pub fn is_terminator(tok: &str) -> bool {
    TERMINATORS.contains(&tok)
}

pub fn is_mnemonic(tok: &str) -> bool {
    MNEMONICS.contains(&tok) || is_terminator(tok)
}
